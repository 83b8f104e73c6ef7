use std::fs;
use std::path::{Path, PathBuf};

use peswap_core::layout::{compose_canvas, ReferenceItem};
use peswap_core::mmdit::{attach_lora, attention_projections, LoraAdapter};
use peswap_core::numkit::rng::derive_seed;
use peswap_core::raster::{Mask, Raster};
use peswap_core::sampler::{make_schedule, sample, Denoiser};
use peswap_core::toyworld::dataset::{eval_scene, EvalScene};
use peswap_core::toyworld::encoder::{
    train_feature_encoder, EncoderKind, EncoderReport, FeatureEncoder,
};
use peswap_core::toyworld::eval::{
    clone_demo, evaluate, tau_sweep, CloneMeasure, EvalContext, EvalReport,
};
use peswap_core::toyworld::train::{
    class_token, init_checkpoint, loss_decreased, train, train_lora, write_loss_csv, Checkpoint,
    LossRecord, MODEL_FILE, NULL_TOKEN,
};
use serde::{Deserialize, Serialize};

use crate::{CliError, RunConfig};

pub const CONFIG_ECHO: &str = "config.toml";
pub const ADAPTER_FILE: &str = "adapter.pbw";

type Result<T> = std::result::Result<T, CliError>;

/// Creates the output directory and writes the resolved config into it.
fn prepare_out(cfg: &mut RunConfig, command: &str) -> Result<PathBuf> {
    let out = cfg.resolve(command)?;
    fs::create_dir_all(&out)?;
    fs::write(out.join(CONFIG_ECHO), cfg.to_toml()?)?;
    Ok(out)
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::MissingArtifact(format!(
            "{what} not found at {}",
            path.display()
        )))
    }
}

fn load_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    require(&cfg.checkpoint.join(MODEL_FILE), "checkpoint")?;
    Ok(Checkpoint::load(&cfg.checkpoint)?)
}

fn load_encoder(cfg: &RunConfig, kind: EncoderKind) -> Result<FeatureEncoder> {
    require(&cfg.checkpoint.join(kind.file_name()), "feature encoder")?;
    Ok(FeatureEncoder::load(&cfg.checkpoint, kind)?)
}

/// The explicit adapter, else the one stored beside the checkpoint, else none.
fn load_adapter(cfg: &RunConfig) -> Result<Option<LoraAdapter>> {
    match &cfg.adapter {
        Some(p) => {
            require(p, "adapter")?;
            Ok(Some(LoraAdapter::load(p)?))
        }
        None => {
            let p = cfg.checkpoint.join(ADAPTER_FILE);
            Ok(if p.exists() {
                Some(LoraAdapter::load(&p)?)
            } else {
                None
            })
        }
    }
}

fn scene_seed(cfg: &RunConfig) -> u64 {
    derive_seed(cfg.seed, "scene")
}

fn mean_loss(log: &[LossRecord]) -> f64 {
    log.iter().map(|r| r.loss as f64).sum::<f64>() / log.len().max(1) as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub loss_first_tenth: f64,
    pub loss_last_tenth: f64,
    pub encoders: Vec<EncoderReport>,
    pub lora_steps: usize,
    pub lora_loss_first_tenth: Option<f64>,
    pub lora_loss_last_tenth: Option<f64>,
}

fn tenths(log: &[LossRecord]) -> (f64, f64) {
    let k = (log.len() / 10).max(1).min(log.len());
    (mean_loss(&log[..k]), mean_loss(&log[log.len() - k..]))
}

/// Trains the base model, both feature encoders and the LoRA adapter, writing
/// everything into the output directory.
pub fn train_toy(
    cfg: &mut RunConfig,
    mut progress: impl FnMut(&str, &LossRecord),
) -> Result<TrainSummary> {
    let out = prepare_out(cfg, "train-toy")?;
    let seed = cfg.seed;
    let init = init_checkpoint(
        cfg.model,
        cfg.geometry,
        cfg.train.codec_samples,
        derive_seed(seed, "init"),
    )?;
    let (ck, log) = train(&init, &cfg.train, derive_seed(seed, "train"), |r| {
        progress("base", r)
    })?;
    ck.save(&out)?;
    write_loss_csv(&log, &out.join("loss.csv"))?;
    let (first, last) = tenths(&log);
    if !log.is_empty() && !loss_decreased(&log) {
        eprintln!("warning: loss did not decrease ({first:.4} -> {last:.4})");
    }

    let mut encoders = Vec::new();
    for kind in [EncoderKind::ClipLike, EncoderKind::DinoLike] {
        let label = format!("encoder/{}", kind.file_name());
        let (enc, report) =
            train_feature_encoder(&cfg.geometry, kind, &cfg.encoder, derive_seed(seed, &label))?;
        enc.save(&out)?;
        encoders.push(report);
    }

    let lora_cfg = &cfg.lora.train;
    let mut lora_tenths = None;
    if lora_cfg.steps > 0 {
        let layers = attention_projections(&ck.model);
        let fresh = attach_lora(
            &ck.params,
            &layers,
            cfg.lora.rank,
            cfg.lora.alpha,
            derive_seed(seed, "lora/init"),
        )?;
        let (adapter, lora_log) = train_lora(
            &ck,
            &fresh,
            lora_cfg,
            derive_seed(seed, "lora/train"),
            |r| progress("lora", r),
        )?;
        adapter.save(out.join(ADAPTER_FILE))?;
        write_loss_csv(&lora_log, &out.join("lora_loss.csv"))?;
        lora_tenths = Some(tenths(&lora_log));
    }

    let summary = TrainSummary {
        steps: cfg.train.steps,
        loss_first_tenth: first,
        loss_last_tenth: last,
        encoders,
        lora_steps: lora_cfg.steps,
        lora_loss_first_tenth: lora_tenths.map(|t| t.0),
        lora_loss_last_tenth: lora_tenths.map(|t| t.1),
    };
    fs::write(
        out.join("train.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Settings actually used by one `edit` run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditSidecar {
    pub checkpoint: PathBuf,
    pub adapter: Option<PathBuf>,
    pub seed: u64,
    pub tau: usize,
    pub n_steps: usize,
    pub text_token: usize,
    pub edit_region: peswap_core::raster::Rect,
    pub references: usize,
    pub scene: String,
    pub image: String,
}

pub struct EditOutput {
    pub image: Raster,
    pub path: PathBuf,
    pub sidecar: EditSidecar,
}

fn load_reference(image: &Path, mask: &Path) -> Result<ReferenceItem> {
    require(image, "reference image")?;
    require(mask, "reference mask")?;
    Ok(ReferenceItem::new(
        Raster::load_png(image)?,
        Mask::load_png(mask)?,
    )?)
}

fn edit_scene(cfg: &RunConfig) -> Result<(EvalScene, String)> {
    let e = &cfg.edit;
    match &e.background {
        None => {
            let scene = eval_scene(&cfg.geometry, e.class_id, scene_seed(cfg))?;
            Ok((scene, format!("built-in class {}", e.class_id)))
        }
        Some(bg) => {
            require(bg, "background")?;
            let background = Raster::load_png(bg)?;
            let side = cfg.geometry.background;
            if background.dims() != (side, side) {
                return Err(CliError::Config(format!(
                    "background is {:?}, expected {side}x{side}",
                    background.dims()
                )));
            }
            let references = e
                .references
                .iter()
                .zip(&e.masks)
                .map(|(i, m)| load_reference(i, m))
                .collect::<Result<Vec<_>>>()?;
            Ok((
                EvalScene {
                    class_id: e.class_id,
                    background,
                    references,
                },
                bg.display().to_string(),
            ))
        }
    }
}

/// Inserts the references into the background's edit region and writes
/// `edit.png` plus `edit.json`.
pub fn edit(cfg: &mut RunConfig) -> Result<EditOutput> {
    let ck = load_checkpoint(cfg)?;
    let adapter = load_adapter(cfg)?;
    let out = prepare_out(cfg, "edit")?;
    let (scene, scene_name) = edit_scene(cfg)?;
    let region = cfg
        .edit
        .region
        .unwrap_or_else(|| cfg.geometry.centered_edit());
    let layout = cfg
        .geometry
        .layout(region)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let refs = ReferenceItem::fill_slots(&scene.references)?;
    let composed = compose_canvas(&layout, &scene.background, &refs)?;
    let text = cfg.edit.text.unwrap_or(if adapter.is_some() {
        class_token(cfg.edit.class_id)
    } else {
        NULL_TOKEN
    });
    if text >= ck.model.vocab {
        return Err(CliError::Config(format!(
            "text token {text} outside vocabulary {}",
            ck.model.vocab
        )));
    }
    let codec = ck.codec()?;
    let d = Denoiser {
        config: &ck.model,
        params: &ck.params,
        codec: &codec,
        adapter: adapter.as_ref(),
        text_ids: &[text],
    };
    let schedule = make_schedule(cfg.sampler.n_steps, cfg.sampler.tau, cfg.seed)?;
    let result = sample(&d, &composed, &layout, &layout.region_maps(), &schedule)?;
    let image = layout_crop(&result.canvas, &layout)?;
    let path = out.join("edit.png");
    image.save_png(&path)?;
    composed.canvas.save_png(out.join("canvas_input.png"))?;
    result.canvas.save_png(out.join("canvas_output.png"))?;
    let sidecar = EditSidecar {
        checkpoint: cfg.checkpoint.clone(),
        adapter: adapter.as_ref().map(|_| {
            cfg.adapter
                .clone()
                .unwrap_or_else(|| cfg.checkpoint.join(ADAPTER_FILE))
        }),
        seed: cfg.seed,
        tau: cfg.sampler.tau,
        n_steps: cfg.sampler.n_steps,
        text_token: text,
        edit_region: region,
        references: scene.references.len(),
        scene: scene_name,
        image: "edit.png".into(),
    };
    fs::write(
        out.join("edit.json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(EditOutput {
        image,
        path,
        sidecar,
    })
}

/// The background area of the canvas, where the edited scene lives.
fn layout_crop(canvas: &Raster, layout: &peswap_core::layout::CanvasLayout) -> Result<Raster> {
    Ok(canvas.crop(&layout.center_slot)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauRow {
    pub tau: usize,
    pub dino_like: f64,
    /// Squared error against the input canvas outside the edit region.
    pub background_error: f64,
}

fn hstack(images: &[&Raster], gap: usize) -> Result<Raster> {
    let h = images.iter().map(|r| r.dims().0).max().unwrap_or(0);
    let w = images.iter().map(|r| r.dims().1).sum::<usize>() + gap * images.len().saturating_sub(1);
    let mut out = Raster::filled(h, w, [255, 255, 255]);
    let mut x = 0;
    for r in images {
        out.paste(r, 0, x)?;
        x += r.dims().1 + gap;
    }
    Ok(out)
}

/// Runs the edit at every configured tau with one seed; writes `grid.png`
/// (input, then one column per tau) and `tau.csv`.
pub fn ablate_tau(cfg: &mut RunConfig) -> Result<Vec<TauRow>> {
    let ck = load_checkpoint(cfg)?;
    let dino = load_encoder(cfg, EncoderKind::DinoLike)?;
    let clip = load_encoder(cfg, EncoderKind::ClipLike)?;
    let out = prepare_out(cfg, "ablate-tau")?;
    let ctx = EvalContext {
        checkpoint: &ck,
        codec: ck.codec()?,
        adapter: None,
        clip_like: &clip,
        dino_like: &dino,
        n_steps: cfg.sampler.n_steps,
        tau: cfg.sampler.tau,
        scene_seed: scene_seed(cfg),
    };
    let runs = tau_sweep(&ctx, cfg.ablate.class_id, cfg.seed, &cfg.ablate_taus())?;
    let mut rows = Vec::new();
    for r in &runs {
        let outside = r.mask.inverted();
        rows.push(TauRow {
            tau: r.tau,
            dino_like: r.dino_like,
            background_error: r.image.squared_error_in(&r.input, &outside),
        });
        r.image.save_png(out.join(format!("tau_{}.png", r.tau)))?;
    }
    if let Some(first) = runs.first() {
        let mut column: Vec<&Raster> = vec![&first.input];
        column.extend(runs.iter().map(|r| &r.image));
        hstack(&column, 2)?.save_png(out.join("grid.png"))?;
    }
    let mut w = csv::Writer::from_path(out.join("tau.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloneRow {
    pub seed: u64,
    pub transplanted_mse: f64,
    pub transplanted_cosine: f64,
    pub control_mse: f64,
    pub control_cosine: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloneSummary {
    pub rows: Vec<CloneRow>,
    pub mean_transplanted_cosine: f64,
    pub mean_control_cosine: f64,
    /// Mean over seeds of transplanted minus control cosine.
    pub margin: f64,
}

/// Unconditional generation with region B on region A's positions, plus the
/// native-position control, for `clone.runs` consecutive seeds.
pub fn demo_clone(cfg: &mut RunConfig) -> Result<CloneSummary> {
    let ck = load_checkpoint(cfg)?;
    let dino = load_encoder(cfg, EncoderKind::DinoLike)?;
    let out = prepare_out(cfg, "demo-clone")?;
    if cfg.clone.runs == 0 {
        return Err(CliError::Config("clone.runs must be positive".into()));
    }
    let codec = ck.codec()?;
    let mut rows = Vec::new();
    for i in 0..cfg.clone.runs as u64 {
        let seed = cfg.seed.wrapping_add(i);
        let r = clone_demo(&ck, &codec, &dino, cfg.sampler.n_steps, seed)?;
        r.transplanted
            .save_png(out.join(format!("clone_{seed}_transplanted.png")))?;
        r.control
            .save_png(out.join(format!("clone_{seed}_control.png")))?;
        let CloneMeasure {
            pixel_mse: tm,
            feature_cosine: tc,
        } = r.transplanted_measure;
        let CloneMeasure {
            pixel_mse: cm,
            feature_cosine: cc,
        } = r.control_measure;
        rows.push(CloneRow {
            seed,
            transplanted_mse: tm,
            transplanted_cosine: tc,
            control_mse: cm,
            control_cosine: cc,
        });
    }
    let n = rows.len() as f64;
    let mt = rows.iter().map(|r| r.transplanted_cosine).sum::<f64>() / n;
    let mc = rows.iter().map(|r| r.control_cosine).sum::<f64>() / n;
    let summary = CloneSummary {
        rows,
        mean_transplanted_cosine: mt,
        mean_control_cosine: mc,
        margin: mt - mc,
    };
    let mut w = csv::Writer::from_path(out.join("clone.csv"))?;
    for row in &summary.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    fs::write(
        out.join("clone.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(summary)
}

/// Scores every (method, class, seed) cell; writes `report.csv` and `report.json`.
pub fn eval(cfg: &mut RunConfig) -> Result<EvalReport> {
    let ck = load_checkpoint(cfg)?;
    let clip = load_encoder(cfg, EncoderKind::ClipLike)?;
    let dino = load_encoder(cfg, EncoderKind::DinoLike)?;
    let adapter = load_adapter(cfg)?;
    if adapter.is_none() && cfg.eval.methods.iter().any(|m| m.needs_adapter()) {
        return Err(CliError::MissingArtifact(
            "LoRA methods requested but no adapter found".into(),
        ));
    }
    let out = prepare_out(cfg, "eval")?;
    let ctx = EvalContext {
        checkpoint: &ck,
        codec: ck.codec()?,
        adapter: adapter.as_ref(),
        clip_like: &clip,
        dino_like: &dino,
        n_steps: cfg.sampler.n_steps,
        tau: cfg.sampler.tau,
        scene_seed: scene_seed(cfg),
    };
    let report = evaluate(&ctx, &cfg.eval.methods, &cfg.eval.classes, &cfg.eval.seeds);
    report.write_csv(&out.join("report.csv"))?;
    report.write_json(&out.join("report.json"))?;
    Ok(report)
}
