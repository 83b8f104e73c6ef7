//! Scenes, training examples and the dataset manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::render::{render_background, render_sample, ShapeSpec, NUM_BACKGROUNDS, NUM_CLASSES};
use crate::error::{contract, Result};
use crate::layout::{compose_canvas, make_layout, CanvasLayout, ComposedCanvas, ReferenceItem};
use crate::numkit::rng::{derive_seed, RandomStream};
use crate::raster::{Mask, Raster, Rect};

/// Pixel geometry of the toy world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldGeometry {
    pub background: usize,
    pub reference: usize,
    /// Side of the square reference renders before slot fitting.
    pub reference_render: usize,
    pub patch: usize,
}

impl Default for WorldGeometry {
    fn default() -> Self {
        Self {
            background: 32,
            reference: 16,
            reference_render: 24,
            patch: 4,
        }
    }
}

impl WorldGeometry {
    /// Centred square edit region, half the background side.
    pub fn centered_edit(&self) -> Rect {
        let s = self.background / 2;
        let o = (self.background - s) / 2;
        Rect::new(o, o, s, s)
    }

    pub fn layout(&self, edit: Rect) -> Result<CanvasLayout> {
        make_layout(
            (self.background, self.background),
            (self.reference, self.reference),
            edit,
            self.patch,
        )
    }

    pub fn render_reference(&self, spec: &ShapeSpec, seed: u64) -> Result<ReferenceItem> {
        let s = self.reference_render;
        let (img, mask) = render_sample(spec, (s, s), seed)?;
        ReferenceItem::new(img, mask)
    }

    pub fn random_reference(
        &self,
        class_id: usize,
        rng: &mut RandomStream,
    ) -> Result<ReferenceItem> {
        let spec = ShapeSpec::random(
            class_id,
            rng,
            (
                0.34 * self.reference_render as f64,
                0.44 * self.reference_render as f64,
            ),
            0.05,
        );
        let seed = rng.below(1 << 30) as u64;
        self.render_reference(&spec, seed)
    }
}

/// How the edit region of a training example was chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    /// Covers the scene glyph.
    Object,
    /// Anywhere in the background.
    Random,
    /// The whole canvas, reference slots included.
    Full,
}

/// One inpainting example on the corner layout.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub class_id: usize,
    pub layout: CanvasLayout,
    pub composed: ComposedCanvas,
    /// Canvas with suppressed reference background, the denoising target.
    pub target: Raster,
    pub kind: EditKind,
}

/// Mix of edit-region kinds and the class policy for references.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExampleMix {
    pub object: f64,
    pub random: f64,
    pub full: f64,
    /// Whether corner references share the scene's class.
    pub matched_references: bool,
}

impl Default for ExampleMix {
    fn default() -> Self {
        Self {
            object: 0.6,
            random: 0.3,
            full: 0.1,
            matched_references: false,
        }
    }
}

fn aligned(v: f64, patch: usize) -> usize {
    ((v / patch as f64).round() as usize) * patch
}

/// Rectangle of side `side` (patch multiple) containing `bbox` as centrally as
/// the background allows.
fn covering_rect(bbox: Rect, side: usize, bg: usize, patch: usize) -> Rect {
    let (cy, cx) = bbox.center();
    let clamp = |c: f64| aligned(c - side as f64 / 2.0, patch).min(bg - side);
    Rect::new(clamp(cy), clamp(cx), side, side)
}

pub fn make_example(
    geom: &WorldGeometry,
    mix: &ExampleMix,
    seed: u64,
    index: u64,
) -> Result<TrainingExample> {
    let mut rng = RandomStream::at(seed, crate::numkit::rng::label_id("example"), index * 4096);
    let class_id = rng.below(NUM_CLASSES);
    let bg = geom.background;
    let spec = ShapeSpec::random(class_id, &mut rng, (0.18 * bg as f64, 0.3 * bg as f64), 0.2);
    let scene_seed = rng.below(1 << 30) as u64;
    let (scene, scene_mask) = render_sample(&spec, (bg, bg), scene_seed)?;
    let refs = (0..4)
        .map(|_| {
            let c = if mix.matched_references {
                class_id
            } else {
                rng.below(NUM_CLASSES)
            };
            geom.random_reference(c, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let u = rng.uniform();
    let p = geom.patch;
    let (kind, edit) = if u < mix.full {
        (EditKind::Full, geom.centered_edit())
    } else if u < mix.full + mix.object {
        let bbox = scene_mask.bbox().unwrap_or_else(|| geom.centered_edit());
        let side =
            (aligned(bbox.h.max(bbox.w) as f64, p) + p * (1 + rng.below(2))).clamp(2 * p, bg);
        (EditKind::Object, covering_rect(bbox, side, bg, p))
    } else {
        let tiles = bg / p;
        let h = (2 + rng.below(tiles - 2)).min(tiles);
        let w = (2 + rng.below(tiles - 2)).min(tiles);
        let y = rng.below(tiles - h + 1);
        let x = rng.below(tiles - w + 1);
        (EditKind::Random, Rect::new(y * p, x * p, h * p, w * p))
    };
    let layout = geom.layout(edit)?;
    let mut composed = compose_canvas(&layout, &scene, &refs)?;
    if kind == EditKind::Full {
        composed.edit_mask = Mask::full(layout.canvas_px.0, layout.canvas_px.1);
    }
    let target = suppress(&composed.canvas, &composed.ref_background);
    Ok(TrainingExample {
        class_id,
        layout,
        composed,
        target,
        kind,
    })
}

/// `canvas` with pixels under `mask` set to black.
pub fn suppress(canvas: &Raster, mask: &Mask) -> Raster {
    let mut out = canvas.clone();
    for y in 0..canvas.height() {
        for x in 0..canvas.width() {
            if mask.get(y, x) {
                out.set(y, x, [0, 0, 0]);
            }
        }
    }
    out
}

/// A fixed evaluation scene: an empty background and four references of one class.
#[derive(Clone, Debug)]
pub struct EvalScene {
    pub class_id: usize,
    pub background: Raster,
    pub references: Vec<ReferenceItem>,
}

/// The fixed scene of `class_id`; independent of the sampling seed.
pub fn eval_scene(geom: &WorldGeometry, class_id: usize, seed: u64) -> Result<EvalScene> {
    contract!(class_id < NUM_CLASSES, "class {} out of range", class_id);
    let mut rng = RandomStream::labeled(
        derive_seed(seed, "eval-scene"),
        &format!("class-{class_id}"),
    );
    let background = render_background(
        rng.below(NUM_BACKGROUNDS),
        geom.background,
        geom.background,
        rng.below(1 << 30) as u64,
    );
    let references = (0..4)
        .map(|_| geom.random_reference(class_id, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalScene {
        class_id,
        background,
        references,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub class_id: usize,
    pub token: String,
    pub spec: ShapeSpec,
    pub image: String,
    pub mask: String,
}

/// Renders `per_class` samples of every class into `dir` and writes `manifest.json`.
pub fn write_dataset(
    dir: &Path,
    geom: &WorldGeometry,
    per_class: usize,
    seed: u64,
) -> Result<Vec<ManifestEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for class_id in 0..NUM_CLASSES {
        let mut rng = RandomStream::labeled(seed, &format!("dataset/{class_id}"));
        for i in 0..per_class {
            let s = geom.reference_render;
            let spec =
                ShapeSpec::random(class_id, &mut rng, (0.3 * s as f64, 0.44 * s as f64), 0.1);
            let (img, mask) =
                render_sample(&spec, (s, s), derive_seed(seed, &format!("{class_id}/{i}")))?;
            let image = format!("c{class_id}_{i:04}.png");
            let mask_name = format!("c{class_id}_{i:04}_mask.png");
            img.save_png(dir.join(&image))?;
            mask.save_png(dir.join(&mask_name))?;
            entries.push(ManifestEntry {
                class_id,
                token: super::render::CLASS_TOKENS[class_id].to_string(),
                spec,
                image,
                mask: mask_name,
            });
        }
    }
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&entries)?,
    )?;
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples_are_reproducible() {
        let g = WorldGeometry::default();
        let mix = ExampleMix::default();
        for i in 0..12 {
            let a = make_example(&g, &mix, 3, i).unwrap();
            let b = make_example(&g, &mix, 3, i).unwrap();
            assert_eq!(a.composed.canvas.bytes(), b.composed.canvas.bytes());
            assert_eq!(a.composed.edit_mask, b.composed.edit_mask);
            assert!(a.layout.center_slot.contains_rect(&a.layout.edit_region_px));
            assert!(!a.composed.edit_mask.is_empty());
        }
    }

    #[test]
    fn object_edits_cover_the_glyph() {
        let g = WorldGeometry::default();
        let mix = ExampleMix {
            object: 1.0,
            random: 0.0,
            full: 0.0,
            matched_references: true,
        };
        for i in 0..8 {
            let e = make_example(&g, &mix, 9, i).unwrap();
            assert_eq!(e.kind, EditKind::Object);
            assert!(e.layout.edit_region_px.area() >= 64);
        }
    }

    #[test]
    fn eval_scene_is_fixed_per_class() {
        let g = WorldGeometry::default();
        let a = eval_scene(&g, 2, 7).unwrap();
        let b = eval_scene(&g, 2, 7).unwrap();
        assert_eq!(a.background, b.background);
        assert_eq!(a.references, b.references);
        assert_ne!(eval_scene(&g, 3, 7).unwrap().references, a.references);
        assert_eq!(g.centered_edit(), Rect::new(8, 8, 16, 16));
    }

    #[test]
    fn dataset_bytes_are_reproducible() {
        let g = WorldGeometry::default();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m1 = write_dataset(d1.path(), &g, 2, 5).unwrap();
        let m2 = write_dataset(d2.path(), &g, 2, 5).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.len(), 2 * NUM_CLASSES);
        for e in &m1 {
            for f in [&e.image, &e.mask] {
                assert_eq!(
                    std::fs::read(d1.path().join(f)).unwrap(),
                    std::fs::read(d2.path().join(f)).unwrap()
                );
            }
        }
    }
}
