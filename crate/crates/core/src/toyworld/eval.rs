//! Similarity scoring, the copy-paste baseline, the method grid and the
//! two mechanism experiments (tau sweep and clone demo).

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{eval_scene, suppress, EvalScene, WorldGeometry};
use super::encoder::{cosine, masked_crop, prototype, FeatureEncoder, CROP};
use super::train::{class_token, Checkpoint, NULL_TOKEN};
use crate::error::{contract, Result};
use crate::layout::{compose_canvas, CanvasLayout, ComposedCanvas, ReferenceItem};
use crate::mmdit::LoraAdapter;
use crate::raster::{Mask, Raster, Rect};
use crate::rope::{transplant_all, RegionMap};
use crate::sampler::{composite, integrate, make_schedule, prepare, sample, Denoiser};
use crate::streams::LatentCodec;

pub const DEFAULT_SEEDS: [u64; 4] = [42, 100, 200, 600];

/// Cosine between the feature of the masked region of `generated` and `class_prototype`.
pub fn score(
    generated: &Raster,
    gen_mask: &Mask,
    class_prototype: &[f32],
    encoder: &FeatureEncoder,
) -> Result<f32> {
    contract!(
        generated.dims() == gen_mask.dims(),
        "image and mask sizes differ"
    );
    let crop = masked_crop(generated, gen_mask)?;
    Ok(cosine(&encoder.feature(&crop)?, class_prototype))
}

/// Reference-slot view of a reference: object fitted into a crop, background black.
pub fn reference_crop(reference: &ReferenceItem) -> Result<Raster> {
    let (img, mask) = reference.fit_to_slot(CROP, CROP)?;
    Ok(suppress(&img, &mask.inverted()))
}

/// Mean unit feature of the reference crops.
pub fn class_prototype(references: &[ReferenceItem], encoder: &FeatureEncoder) -> Result<Vec<f32>> {
    let crops = references
        .iter()
        .map(reference_crop)
        .collect::<Result<Vec<_>>>()?;
    let f = encoder.embed(&crops)?;
    Ok(prototype(
        &(0..f.rows()).map(|r| f.row(r).to_vec()).collect::<Vec<_>>(),
    ))
}

/// Pastes the reference object, fitted to `edit_region`, over `background`
/// through its segmentation mask.
pub fn copy_paste_baseline(
    background: &Raster,
    edit_region: Rect,
    reference: &ReferenceItem,
) -> Result<Raster> {
    let (h, w) = background.dims();
    contract!(
        Rect::new(0, 0, h, w).contains_rect(&edit_region) && edit_region.area() > 0,
        "edit region {:?} outside the {}x{} background",
        edit_region,
        h,
        w
    );
    let (img, mask) = reference.fit_to_slot(edit_region.h, edit_region.w)?;
    let mut out = background.clone();
    for y in 0..edit_region.h {
        for x in 0..edit_region.w {
            if mask.get(y, x) {
                out.set(edit_region.y + y, edit_region.x + x, img.get(y, x));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SwPE")]
    SwPE,
    #[serde(rename = "LoRA")]
    Lora,
    #[serde(rename = "LoRA+SwPE")]
    LoraSwPE,
    #[serde(rename = "Single")]
    Single,
    #[serde(rename = "Copy-Paste")]
    CopyPaste,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SwPE,
        Method::Lora,
        Method::LoraSwPE,
        Method::Single,
        Method::CopyPaste,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Method::SwPE => "SwPE",
            Method::Lora => "LoRA",
            Method::LoraSwPE => "LoRA+SwPE",
            Method::Single => "Single",
            Method::CopyPaste => "Copy-Paste",
        }
    }

    pub fn needs_adapter(self) -> bool {
        matches!(self, Method::Lora | Method::LoraSwPE | Method::Single)
    }
}

impl std::str::FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| crate::Error::Contract(format!("unknown method `{s}`")))
    }
}

/// Trained artefacts shared by every cell of an evaluation.
pub struct EvalContext<'a> {
    pub checkpoint: &'a Checkpoint,
    pub codec: LatentCodec,
    pub adapter: Option<&'a LoraAdapter>,
    pub clip_like: &'a FeatureEncoder,
    pub dino_like: &'a FeatureEncoder,
    pub n_steps: usize,
    pub tau: usize,
    /// Seed of the fixed per-class scenes (not the sampling seed).
    pub scene_seed: u64,
}

/// One insertion result: the full canvas output and the edit mask within it.
#[derive(Clone, Debug)]
pub struct Insertion {
    pub image: Raster,
    pub mask: Mask,
}

impl EvalContext<'_> {
    pub fn geometry(&self) -> &WorldGeometry {
        &self.checkpoint.geometry
    }

    pub fn scene(&self, class_id: usize) -> Result<EvalScene> {
        eval_scene(self.geometry(), class_id, self.scene_seed)
    }

    pub fn layout(&self) -> Result<CanvasLayout> {
        let g = self.geometry();
        g.layout(g.centered_edit())
    }

    /// Samples the edit region with the given prompt, tau and references.
    pub fn edit(
        &self,
        scene: &EvalScene,
        references: &[ReferenceItem],
        adapter: Option<&LoraAdapter>,
        text: usize,
        tau: usize,
        seed: u64,
    ) -> Result<(ComposedCanvas, Raster)> {
        let layout = self.layout()?;
        let refs = ReferenceItem::fill_slots(references)?;
        let composed = compose_canvas(&layout, &scene.background, &refs)?;
        let d = Denoiser {
            config: &self.checkpoint.model,
            params: &self.checkpoint.params,
            codec: &self.codec,
            adapter,
            text_ids: &[text],
        };
        let out = sample(
            &d,
            &composed,
            &layout,
            &layout.region_maps(),
            &make_schedule(self.n_steps, tau, seed)?,
        )?;
        Ok((composed, out.canvas))
    }

    pub fn run(&self, method: Method, class_id: usize, seed: u64) -> Result<Insertion> {
        let scene = self.scene(class_id)?;
        if method == Method::CopyPaste {
            let edit = self.geometry().centered_edit();
            let image = copy_paste_baseline(&scene.background, edit, &scene.references[0])?;
            let (h, w) = image.dims();
            return Ok(Insertion {
                image,
                mask: Mask::from_rect(h, w, &edit),
            });
        }
        let adapter = if method.needs_adapter() {
            Some(self.adapter.ok_or_else(|| {
                crate::Error::Contract(format!("{} needs a LoRA adapter", method.label()))
            })?)
        } else {
            None
        };
        let (text, tau) = match method {
            Method::SwPE => (NULL_TOKEN, self.tau),
            Method::Lora => (class_token(class_id), 0),
            _ => (class_token(class_id), self.tau),
        };
        let refs = if method == Method::Single {
            &scene.references[..1]
        } else {
            &scene.references[..]
        };
        let (composed, image) = self.edit(&scene, refs, adapter, text, tau, seed)?;
        Ok(Insertion {
            image,
            mask: composed.edit_mask,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: Method,
    pub class_id: usize,
    pub seed: u64,
    pub clip_i_like: Option<f64>,
    pub dino_like: Option<f64>,
    pub composite: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub clip_i_like: f64,
    pub dino_like: f64,
    pub composite: f64,
    pub cells: usize,
    pub missing: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<MethodSummary>,
}

pub fn composite_score(clip_i_like: f64, dino_like: f64) -> f64 {
    (clip_i_like + dino_like) / 2.0
}

impl EvalReport {
    pub fn from_rows(rows: Vec<EvalRow>) -> Self {
        let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        let summary = methods
            .into_iter()
            .map(|m| {
                let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.method == m).collect();
                let ok: Vec<&&EvalRow> = mine.iter().filter(|r| r.error.is_none()).collect();
                let mean = |f: &dyn Fn(&EvalRow) -> Option<f64>| {
                    ok.iter().filter_map(|r| f(r)).sum::<f64>() / ok.len().max(1) as f64
                };
                let clip = mean(&|r| r.clip_i_like);
                let dino = mean(&|r| r.dino_like);
                MethodSummary {
                    method: m,
                    clip_i_like: clip,
                    dino_like: dino,
                    composite: composite_score(clip, dino),
                    cells: mine.len(),
                    missing: mine.len() - ok.len(),
                }
            })
            .collect();
        Self { rows, summary }
    }

    pub fn summary_of(&self, method: Method) -> Option<&MethodSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "method",
            "class_id",
            "seed",
            "clip_i_like",
            "dino_like",
            "composite",
            "error",
        ])?;
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.method.label().to_string(),
                r.class_id.to_string(),
                r.seed.to_string(),
                f(r.clip_i_like),
                f(r.dino_like),
                f(r.composite),
                r.error.clone().unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Scores one cell; failures become a flagged row.
pub fn evaluate_cell(ctx: &EvalContext, method: Method, class_id: usize, seed: u64) -> EvalRow {
    let scored = (|| -> Result<(f64, f64)> {
        let scene = ctx.scene(class_id)?;
        let out = ctx.run(method, class_id, seed)?;
        let pc = class_prototype(&scene.references, ctx.clip_like)?;
        let pd = class_prototype(&scene.references, ctx.dino_like)?;
        Ok((
            score(&out.image, &out.mask, &pc, ctx.clip_like)? as f64,
            score(&out.image, &out.mask, &pd, ctx.dino_like)? as f64,
        ))
    })();
    match scored {
        Ok((c, d)) => EvalRow {
            method,
            class_id,
            seed,
            clip_i_like: Some(c),
            dino_like: Some(d),
            composite: Some(composite_score(c, d)),
            error: None,
        },
        Err(e) => EvalRow {
            method,
            class_id,
            seed,
            clip_i_like: None,
            dino_like: None,
            composite: None,
            error: Some(e.to_string()),
        },
    }
}

pub fn evaluate(
    ctx: &EvalContext,
    methods: &[Method],
    classes: &[usize],
    seeds: &[u64],
) -> EvalReport {
    let mut rows = Vec::new();
    for &m in methods {
        for &c in classes {
            for &s in seeds {
                rows.push(evaluate_cell(ctx, m, c, s));
            }
        }
    }
    EvalReport::from_rows(rows)
}

/// One column of a tau sweep.
#[derive(Clone, Debug)]
pub struct TauRun {
    pub tau: usize,
    pub image: Raster,
    pub mask: Mask,
    pub input: Raster,
    pub dino_like: f64,
}

/// Base-model insertion (generic prompt) for each tau at a fixed seed.
pub fn tau_sweep(
    ctx: &EvalContext,
    class_id: usize,
    seed: u64,
    taus: &[usize],
) -> Result<Vec<TauRun>> {
    let scene = ctx.scene(class_id)?;
    let proto = class_prototype(&scene.references, ctx.dino_like)?;
    taus.iter()
        .map(|&tau| {
            let (composed, image) =
                ctx.edit(&scene, &scene.references, None, NULL_TOKEN, tau, seed)?;
            let s = score(&image, &composed.edit_mask, &proto, ctx.dino_like)? as f64;
            Ok(TauRun {
                tau,
                image,
                mask: composed.edit_mask,
                input: composed.canvas,
                dino_like: s,
            })
        })
        .collect()
}

/// Outputs of the shared-position clone experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CloneMeasure {
    pub pixel_mse: f64,
    pub feature_cosine: f64,
}

#[derive(Clone, Debug)]
pub struct CloneResult {
    pub transplanted: Raster,
    pub control: Raster,
    pub region_a: Rect,
    pub region_b: Rect,
    pub transplanted_measure: CloneMeasure,
    pub control_measure: CloneMeasure,
}

fn measure(img: &Raster, a: &Rect, b: &Rect, encoder: &FeatureEncoder) -> Result<CloneMeasure> {
    let (ca, cb) = (img.crop(a)?, img.crop(b)?);
    let n = ca.bytes().len() as f64;
    let mse = ca
        .bytes()
        .iter()
        .zip(cb.bytes())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n;
    let f = encoder.embed(&[ca, cb])?;
    Ok(CloneMeasure {
        pixel_mse: mse,
        feature_cosine: cosine(f.row(0), f.row(1)) as f64,
    })
}

/// Unconditional generation of the whole layout where region B (bottom-right
/// slot) takes region A's (top-left slot) positions on every step, next to a
/// control run with native positions and the same noise.
pub fn clone_demo(
    ck: &Checkpoint,
    codec: &LatentCodec,
    encoder: &FeatureEncoder,
    n_steps: usize,
    seed: u64,
) -> Result<CloneResult> {
    let g = &ck.geometry;
    let layout = g.layout(g.centered_edit())?;
    let (h, w) = layout.canvas_px;
    let composed = ComposedCanvas {
        canvas: Raster::new(h, w),
        edit_mask: Mask::full(h, w),
        ref_background: Mask::new(h, w),
    };
    let d = Denoiser {
        config: &ck.model,
        params: &ck.params,
        codec,
        adapter: None,
        text_ids: &[NULL_TOKEN],
    };
    let prep = prepare(&d, &composed, &layout, seed)?;
    let slots = layout.corner_tokens();
    let (ta, tb) = (slots[0], slots[3]);
    let shared = transplant_all(&prep.positions, &[RegionMap::new(tb, ta)?])?;
    let schedule = make_schedule(n_steps, n_steps, seed)?;
    let run = |grid: &crate::rope::PositionGrid| -> Result<Raster> {
        let (latent, _) = integrate(
            prep.streams.noise.clone(),
            &schedule,
            grid,
            grid,
            |s, gr, t| d.velocity(&prep.streams, &s.latent, gr, t),
        )?;
        composite(
            codec,
            &latent,
            &prep.map,
            &composed.canvas,
            &composed.edit_mask,
        )
    };
    let transplanted = run(&shared)?;
    let control = run(&prep.positions)?;
    let (ra, rb) = (layout.corner_slots[0], layout.corner_slots[3]);
    Ok(CloneResult {
        transplanted_measure: measure(&transplanted, &ra, &rb, encoder)?,
        control_measure: measure(&control, &ra, &rb, encoder)?,
        transplanted,
        control,
        region_a: ra,
        region_b: rb,
    })
}
