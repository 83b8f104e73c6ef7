//! Flow-matching training of the base model and of class-token LoRA adapters.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{make_example, ExampleMix, TrainingExample, WorldGeometry};
use crate::error::{contract, Error, Result};
use crate::layout::IndexMap;
use crate::mmdit::{
    batch_rotation, forward_graph, fuse_batch, init_params, LoraAdapter, LoraVars, ModelConfig,
    SeqLayout,
};
use crate::numkit::rng::{derive_seed, RandomStream};
use crate::numkit::{clip_grad_norm, weights, Adam, AdamConfig, Graph, Params, Tensor};
use crate::rope::{rope_tables, RopeTable};
use crate::streams::{encode_mask, encode_masked_image, LatentCodec};

/// Prompt id of the generic (class-agnostic) prompt; class `c` uses `c + 1`.
pub const NULL_TOKEN: usize = 0;

pub fn class_token(class_id: usize) -> usize {
    class_id + 1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup: usize,
    pub clip: f32,
    /// Loss weight of tokens outside the edit mask (edit tokens weigh 1).
    pub context_weight: f32,
    pub mix: ExampleMix,
    /// Training canvases used to fit the latent codec.
    pub codec_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 16,
            lr: 1e-3,
            warmup: 200,
            clip: 1.0,
            context_weight: 0.1,
            mix: ExampleMix::default(),
            codec_samples: 96,
        }
    }
}

impl TrainConfig {
    /// Learning-rate multiplier: linear warmup then cosine decay to 10%.
    pub fn lr_scale(&self, step: usize) -> f32 {
        if step < self.warmup {
            return (step + 1) as f32 / self.warmup as f32;
        }
        let span = (self.steps - self.warmup).max(1) as f32;
        let p = ((step - self.warmup) as f32 / span).min(1.0);
        0.1 + 0.9 * 0.5 * (1.0 + (std::f32::consts::PI * p).cos())
    }
}

/// Model configuration, world geometry and weights (codec included).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub geometry: WorldGeometry,
    pub params: Params,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    model: ModelConfig,
    geometry: WorldGeometry,
}

pub const MODEL_FILE: &str = "model.pbw";
pub const MODEL_META: &str = "model.json";

impl Checkpoint {
    pub fn codec(&self) -> Result<LatentCodec> {
        LatentCodec::from_params(&self.params, self.geometry.patch)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        weights::save(&self.params, dir.join(MODEL_FILE))?;
        let meta = CheckpointMeta {
            model: self.model,
            geometry: self.geometry,
        };
        std::fs::write(dir.join(MODEL_META), serde_json::to_vec_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_slice(&std::fs::read(dir.join(MODEL_META))?)?;
        let params = weights::load(dir.join(MODEL_FILE))?;
        let ck = Self {
            model: meta.model,
            geometry: meta.geometry,
            params,
        };
        ck.codec()?;
        Ok(ck)
    }
}

/// Fits the latent codec to denoising targets of `samples` training examples.
pub fn fit_codec(
    geom: &WorldGeometry,
    c_noise: usize,
    samples: usize,
    seed: u64,
) -> Result<LatentCodec> {
    let mix = ExampleMix {
        object: 1.0,
        random: 0.0,
        full: 0.0,
        matched_references: false,
    };
    let seed = derive_seed(seed, "codec");
    let images = (0..samples.max(1) as u64)
        .map(|i| make_example(geom, &mix, seed, i).map(|e| e.target))
        .collect::<Result<Vec<_>>>()?;
    LatentCodec::fit(&images, geom.patch, c_noise)
}

/// Fresh checkpoint: random transformer weights plus a fitted codec.
pub fn init_checkpoint(
    model: ModelConfig,
    geometry: WorldGeometry,
    codec_samples: usize,
    seed: u64,
) -> Result<Checkpoint> {
    model.validate()?;
    contract!(
        model.streams.patch == geometry.patch,
        "model patch {} vs world patch {}",
        model.streams.patch,
        geometry.patch
    );
    let mut params = init_params(&model, derive_seed(seed, "init"))?;
    params.extend(fit_codec(&geometry, model.streams.c_noise, codec_samples, seed)?.to_params());
    Ok(Checkpoint {
        model,
        geometry,
        params,
    })
}

/// Tensors for one batch on the compact sequence.
struct Batch {
    noise: Tensor,
    image: Tensor,
    mask: Tensor,
    target: Tensor,
    t: Vec<f32>,
    text: Vec<usize>,
    weights: Vec<f32>,
}

struct Prepared {
    map: IndexMap,
    table: RopeTable,
}

fn prepare(geom: &WorldGeometry, model: &ModelConfig) -> Result<Prepared> {
    let layout = geom.layout(geom.centered_edit())?;
    let map = IndexMap::from_regions(&layout.regions(), layout.token_dims())?;
    let grid = crate::layout::restructure_positions(&layout.positions(), &map)?;
    let table = rope_tables(&grid, model.head_dim, model.rope_base)?;
    Ok(Prepared { map, table })
}

fn build_batch(
    examples: &[TrainingExample],
    codec: &LatentCodec,
    map: &IndexMap,
    rng: &mut RandomStream,
    text_of: impl Fn(&TrainingExample) -> usize,
    context_weight: f32,
) -> Result<Batch> {
    let idx = &map.compact_to_grid;
    let (mut noise, mut image, mut mask, mut target) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut t, mut text, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    let patch = codec.patch;
    for e in examples {
        let x0 = codec.encode(&e.target)?.gather_rows(idx)?;
        let eps = rng.gaussian_tensor(x0.shape(), 1.0);
        let ti = rng.uniform() as f32;
        for (a, b) in x0.data().iter().zip(eps.data()) {
            noise.push((1.0 - ti) * a + ti * b);
            target.push(b - a);
        }
        let img = encode_masked_image(
            &e.composed.canvas,
            &e.composed.edit_mask,
            &e.composed.ref_background,
            patch,
        )?;
        image.extend_from_slice(img.gather_rows(idx)?.data());
        let m = encode_mask(&e.composed.edit_mask, patch)?.gather_rows(idx)?;
        for r in 0..m.rows() {
            weights.push(if m.row(r).iter().any(|&v| v > 0.5) {
                1.0
            } else {
                context_weight
            });
        }
        mask.extend_from_slice(m.data());
        t.push(ti);
        text.push(text_of(e));
    }
    let n = examples.len() * idx.len();
    let w = |v: Vec<f32>| Tensor::new(vec![n, v.len() / n], v);
    Ok(Batch {
        noise: w(noise)?,
        image: w(image)?,
        mask: w(mask)?,
        target: w(target)?,
        t,
        text,
        weights,
    })
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f32,
    pub grad_norm: f32,
}

/// Mean of the last tenth of the curve is below the mean of the first tenth.
pub fn loss_decreased(log: &[LossRecord]) -> bool {
    let k = (log.len() / 10).max(1);
    if log.len() < 2 {
        return false;
    }
    let mean = |s: &[LossRecord]| s.iter().map(|r| r.loss as f64).sum::<f64>() / s.len() as f64;
    mean(&log[log.len() - k..]) < mean(&log[..k])
}

pub fn write_loss_csv(log: &[LossRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in log {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Binds trainable tensors into a fresh graph, plus LoRA factors when training an adapter.
type BindFn<'a> =
    dyn Fn(&mut Graph, &Params) -> (BTreeMap<String, crate::numkit::Var>, Option<LoraVars>) + 'a;

struct Loop<'a> {
    ck: &'a Checkpoint,
    config: &'a TrainConfig,
    seed: u64,
    text_of: &'a dyn Fn(&TrainingExample) -> usize,
}

impl Loop<'_> {
    /// Runs the optimisation; `trainable` tensors live in `state` and are
    /// updated in place.
    fn run(
        &self,
        state: &mut Params,
        bind: &BindFn<'_>,
        progress: &mut dyn FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        let cfg = self.config;
        contract!(cfg.batch >= 1, "batch must be positive");
        let model = &self.ck.model;
        let codec = self.ck.codec()?;
        let prep = prepare(&self.ck.geometry, model)?;
        let tables: Vec<&RopeTable> = (0..cfg.batch).map(|_| &prep.table).collect();
        let rot = batch_rotation(&tables, 1)?;
        let layout = SeqLayout {
            batch: cfg.batch,
            spatial: prep.map.len(),
            text: 1,
        };
        let mut adam = Adam::new(AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        });
        let mut rng = RandomStream::labeled(self.seed, "train/noise");
        let data_seed = derive_seed(self.seed, "train/data");
        let mut log = Vec::with_capacity(cfg.steps);
        for step in 0..cfg.steps {
            let examples = (0..cfg.batch)
                .map(|i| {
                    make_example(
                        &self.ck.geometry,
                        &cfg.mix,
                        data_seed,
                        (step * cfg.batch + i) as u64,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let b = build_batch(
                &examples,
                &codec,
                &prep.map,
                &mut rng,
                self.text_of,
                cfg.context_weight,
            )?;
            let mut g = Graph::new();
            let (p, lora) = bind(&mut g, state);
            let noise = g.constant(b.noise);
            let image = g.constant(b.image);
            let mask = g.constant(b.mask);
            let x = fuse_batch(&mut g, &p, noise, image, mask, &b.text, &layout)?;
            let out = forward_graph(&mut g, &p, lora.as_ref(), model, x, &rot, &b.t, &layout)?;
            let target = g.constant(b.target);
            let loss = g.mse(out, target, Some(b.weights))?;
            let lv = g.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Training(format!("loss became {lv} at step {step}")));
            }
            let mut grads = g.backward(loss)?.into_named(&g);
            let grad_norm = clip_grad_norm(&mut grads, cfg.clip);
            adam.step(state, &grads, cfg.lr_scale(step))?;
            let rec = LossRecord {
                step,
                loss: lv,
                grad_norm,
            };
            progress(&rec);
            log.push(rec);
        }
        Ok(log)
    }
}

/// Trains the base model with the generic prompt. Zero steps return the
/// parameters unchanged.
pub fn train(
    ck: &Checkpoint,
    config: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&LossRecord),
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    let frozen = |name: &str| name.starts_with("codec.");
    let mut state: Params = ck
        .params
        .iter()
        .filter(|(k, _)| !frozen(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let codec_params: Params = ck
        .params
        .iter()
        .filter(|(k, _)| frozen(k))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let lp = Loop {
        ck,
        config,
        seed,
        text_of: &|_| NULL_TOKEN,
    };
    let log = lp.run(
        &mut state,
        &|g, s| (s.bind(g, |_| true), None),
        &mut progress,
    )?;
    state.extend(codec_params);
    Ok((
        Checkpoint {
            params: state,
            ..ck.clone()
        },
        log,
    ))
}

/// Trains `adapter` on a frozen base with class prompts.
pub fn train_lora(
    ck: &Checkpoint,
    adapter: &LoraAdapter,
    config: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&LossRecord),
) -> Result<(LoraAdapter, Vec<LossRecord>)> {
    let mut state = adapter.to_params();
    let scale = adapter.scale;
    let base = &ck.params;
    let text_of = |e: &TrainingExample| class_token(e.class_id);
    let lp = Loop {
        ck,
        config,
        seed,
        text_of: &text_of,
    };
    let bind = |g: &mut Graph, s: &Params| {
        let p = base.bind(g, |_| false);
        let factors = s
            .iter()
            .filter_map(|(k, v)| {
                let layer = k.strip_prefix("lora.")?.strip_suffix(".a")?;
                let a = g.param(k.clone(), v.clone());
                let bname = format!("lora.{layer}.b");
                let b = g.param(bname.clone(), s.get(&bname).ok()?.clone());
                Some((layer.to_string(), (a, b)))
            })
            .collect();
        (p, Some(LoraVars { scale, factors }))
    };
    let log = lp.run(&mut state, &bind, &mut progress)?;
    Ok((LoraAdapter::from_params(&state)?, log))
}
