//! Single-stream joint-attention diffusion transformer with adaptive layer
//! norm timestep conditioning and optional low-rank adapters.
//!
//! A sequence is `n` spatial tokens followed by `k` text tokens. RoPE rotates
//! the queries and keys of spatial tokens only; text rows get the identity.
//! The head predicts a velocity for the spatial tokens.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{contract, shape_check, Result};
use crate::numkit::rng::{gaussian, label_id};
use crate::numkit::{Graph, PairRotation, Params, Tensor, Var};
use crate::rope::{rope_tables, PositionGrid, RopeTable, DEFAULT_BASE};
use crate::streams::{self, StreamConfig, TokenStreams, TEXT_EMBED};

/// Width of the sinusoidal timestep features.
pub const TIME_FEATURES: usize = 64;
const LN_EPS: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub streams: StreamConfig,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_ratio: f64,
    pub vocab: usize,
    pub rope_base: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 4 blocks, width 128, 4 heads of 32.
    pub fn toy() -> Self {
        Self {
            streams: StreamConfig::toy(),
            n_blocks: 4,
            n_heads: 4,
            head_dim: 32,
            mlp_ratio: 2.0,
            vocab: 9,
            rope_base: DEFAULT_BASE,
        }
    }

    /// Smaller preset that trains in minutes on one CPU core.
    pub fn desk() -> Self {
        Self {
            streams: StreamConfig {
                d_model: 64,
                ..StreamConfig::toy()
            },
            n_blocks: 3,
            n_heads: 2,
            head_dim: 32,
            ..Self::toy()
        }
    }

    pub fn d_model(&self) -> usize {
        self.streams.d_model
    }

    pub fn mlp_width(&self) -> usize {
        ((self.d_model() as f64 * self.mlp_ratio).round() as usize).max(1)
    }

    pub fn c_out(&self) -> usize {
        self.streams.c_noise
    }

    pub fn validate(&self) -> Result<()> {
        self.streams.validate()?;
        contract!(
            self.n_blocks >= 1 && self.n_heads >= 1 && self.vocab >= 1,
            "model dimensions must be positive"
        );
        contract!(
            self.d_model() == self.n_heads * self.head_dim,
            "d_model {} != {} heads x {}",
            self.d_model(),
            self.n_heads,
            self.head_dim
        );
        contract!(
            self.head_dim >= 4 && self.head_dim.is_multiple_of(4),
            "head_dim {} must be a positive multiple of 4",
            self.head_dim
        );
        contract!(self.mlp_ratio > 0.0, "mlp_ratio must be positive");
        Ok(())
    }
}

/// Names of the attention projections, the only layers LoRA may adapt.
pub fn attention_projections(config: &ModelConfig) -> Vec<String> {
    (0..config.n_blocks)
        .flat_map(|b| ["q", "k", "v", "o"].map(|p| format!("blocks.{b}.attn.{p}.w")))
        .collect()
}

/// Sinusoidal features of `t`, `[cos | sin]` over geometric frequencies.
pub fn timestep_features(t: f32) -> Vec<f32> {
    let half = TIME_FEATURES / 2;
    let mut out = vec![0.0; TIME_FEATURES];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = 1000.0 * t as f64 * freq;
        out[i] = arg.cos() as f32;
        out[half + i] = arg.sin() as f32;
    }
    out
}

/// Fresh parameters for the transformer and its stream projections.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<Params> {
    config.validate()?;
    let d = config.d_model();
    let m = config.mlp_width();
    let mut p = streams::init_projection(&config.streams, config.vocab, seed)?;
    p.insert(
        TEXT_EMBED,
        gaussian(seed, label_id(TEXT_EMBED), &[config.vocab, d]),
    );
    let mut dense = |name: String, fan_in: usize, fan_out: usize, gain: f32| {
        let w = gaussian(seed, label_id(&name), &[fan_in, fan_out])
            .scale(gain / (fan_in as f32).sqrt());
        p.insert(name.replace(".w", ".b"), Tensor::zeros(&[fan_out]));
        p.insert(name, w);
    };
    dense("t_embed.fc1.w".into(), TIME_FEATURES, d, 1.0);
    dense("t_embed.fc2.w".into(), d, d, 1.0);
    for b in 0..config.n_blocks {
        dense(format!("blocks.{b}.mod.w"), d, 6 * d, 0.1);
        for proj in ["q", "k", "v", "o"] {
            dense(format!("blocks.{b}.attn.{proj}.w"), d, d, 1.0);
        }
        dense(format!("blocks.{b}.mlp.fc1.w"), d, m, 1.0);
        dense(format!("blocks.{b}.mlp.fc2.w"), m, d, 1.0);
    }
    dense("final.mod.w".into(), d, 2 * d, 0.1);
    dense("final.out.w".into(), d, config.c_out(), 0.1);
    Ok(p)
}

/// Low-rank factors for a set of linear layers: `W' = W + scale * A B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub scale: f32,
    /// Layer weight name to `(A: [d_in, rank], B: [rank, d_out])`.
    pub factors: BTreeMap<String, (Tensor, Tensor)>,
}

impl LoraAdapter {
    pub fn delta(&self, layer: &str) -> Result<Tensor> {
        let (a, b) = self
            .factors
            .get(layer)
            .ok_or_else(|| crate::Error::MissingParam(format!("lora factors for {layer}")))?;
        Ok(a.matmul(b)?.scale(self.scale))
    }

    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert("lora.rank", Tensor::scalar(self.rank as f32));
        p.insert("lora.scale", Tensor::scalar(self.scale));
        for (name, (a, b)) in &self.factors {
            p.insert(format!("lora.{name}.a"), a.clone());
            p.insert(format!("lora.{name}.b"), b.clone());
        }
        p
    }

    pub fn from_params(p: &Params) -> Result<Self> {
        let rank = p.get("lora.rank")?.item()?;
        contract!(
            rank >= 1.0 && rank.fract() == 0.0,
            "stored adapter rank {} is not a positive integer",
            rank
        );
        let scale = p.get("lora.scale")?.item()?;
        let mut factors = BTreeMap::new();
        for name in p.names() {
            if let Some(layer) = name
                .strip_prefix("lora.")
                .and_then(|n| n.strip_suffix(".a"))
            {
                let a = p.get(name)?.clone();
                let b = p.get(&format!("lora.{layer}.b"))?.clone();
                shape_check!(
                    a.cols() == rank as usize && b.rows() == rank as usize,
                    "factors of {} do not have rank {}",
                    layer,
                    rank
                );
                factors.insert(layer.to_string(), (a, b));
            }
        }
        Ok(Self {
            rank: rank as usize,
            scale,
            factors,
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        crate::numkit::weights::save(&self.to_params(), path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_params(&crate::numkit::weights::load(path)?)
    }
}

/// Fresh adapter on `layers` with Gaussian `A`, zero `B` and `scale = alpha / rank`.
pub fn attach_lora(
    params: &Params,
    layers: &[String],
    rank: usize,
    alpha: f32,
    seed: u64,
) -> Result<LoraAdapter> {
    contract!(rank >= 1, "LoRA rank must be at least 1");
    contract!(!layers.is_empty(), "no layers selected for LoRA");
    let mut factors = BTreeMap::new();
    for layer in layers {
        contract!(
            layer.contains(".attn.") && layer.ends_with(".w"),
            "LoRA only adapts attention projections, not {}",
            layer
        );
        let w = params.get(layer)?;
        let (din, dout) = (w.rows(), w.cols());
        contract!(
            rank <= din.min(dout),
            "rank {} exceeds the {}x{} layer {}",
            rank,
            din,
            dout,
            layer
        );
        let a = gaussian(seed, label_id(&format!("lora/{layer}")), &[din, rank])
            .scale(1.0 / (din as f32).sqrt());
        factors.insert(layer.clone(), (a, Tensor::zeros(&[rank, dout])));
    }
    Ok(LoraAdapter {
        rank,
        scale: alpha / rank as f32,
        factors,
    })
}

/// `params` with every adapted weight replaced by `W + scale * A B`.
pub fn merge_lora(params: &Params, adapter: &LoraAdapter) -> Result<Params> {
    let mut out = params.clone();
    for layer in adapter.factors.keys() {
        let delta = adapter.delta(layer)?;
        let w = out.get_mut(layer)?;
        shape_check!(
            w.shape() == delta.shape(),
            "adapter delta {:?} for {} of shape {:?}",
            delta.shape(),
            layer,
            w.shape()
        );
        *w = w.add(&delta)?;
    }
    Ok(out)
}

/// Graph handles for a bound adapter.
pub struct LoraVars {
    pub scale: f32,
    pub factors: BTreeMap<String, (Var, Var)>,
}

impl LoraVars {
    /// Registers the factors; trainable ones are named `lora.<layer>.a/.b`.
    pub fn bind(g: &mut Graph, adapter: &LoraAdapter, trainable: bool) -> Self {
        let factors = adapter
            .factors
            .iter()
            .map(|(name, (a, b))| {
                let vars = if trainable {
                    (
                        g.param(format!("lora.{name}.a"), a.clone()),
                        g.param(format!("lora.{name}.b"), b.clone()),
                    )
                } else {
                    (g.constant(a.clone()), g.constant(b.clone()))
                };
                (name.clone(), vars)
            })
            .collect();
        Self {
            scale: adapter.scale,
            factors,
        }
    }
}

/// Shape of a batch of sequences laid out as `[spatial..., text...]` per sample.
#[derive(Clone, Debug)]
pub struct SeqLayout {
    pub batch: usize,
    pub spatial: usize,
    pub text: usize,
}

impl SeqLayout {
    pub fn seq(&self) -> usize {
        self.spatial + self.text
    }

    /// Rows of the spatial tokens in the batched sequence.
    pub fn spatial_rows(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| (0..self.spatial).map(move |i| b * self.seq() + i))
            .collect()
    }

    /// Permutation interleaving `[all spatial rows; all text rows]` into per-sample sequences.
    pub fn interleave(&self) -> Vec<usize> {
        let spatial_total = self.batch * self.spatial;
        (0..self.batch)
            .flat_map(|b| {
                (0..self.spatial)
                    .map(move |i| b * self.spatial + i)
                    .chain((0..self.text).map(move |j| spatial_total + b * self.text + j))
            })
            .collect()
    }
}

struct Ctx<'a> {
    p: &'a BTreeMap<String, Var>,
    lora: Option<&'a LoraVars>,
}

impl Ctx<'_> {
    fn get(&self, name: &str) -> Result<Var> {
        self.p
            .get(name)
            .copied()
            .ok_or_else(|| crate::Error::MissingParam(name.into()))
    }

    fn dense(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let wname = format!("{prefix}.w");
        let y = g.linear(
            x,
            self.get(&wname)?,
            Some(self.get(&format!("{prefix}.b"))?),
        )?;
        match self
            .lora
            .and_then(|l| l.factors.get(&wname).map(|f| (l.scale, *f)))
        {
            Some((scale, (a, b))) => {
                let xa = g.matmul(x, a)?;
                let d = g.matmul(xa, b)?;
                let d = g.scale(d, scale);
                g.add(y, d)
            }
            None => Ok(y),
        }
    }
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let s = g.add_scalar(scale, 1.0);
    let n = g.mul(n, s)?;
    g.add(n, shift)
}

/// Transformer body on an already fused batch `x: [batch * seq, d_model]`.
/// `rot` must cover every row (identity on text rows); `t` holds one time per
/// sample. Returns `[batch * spatial, c_out]`.
#[allow(clippy::too_many_arguments)]
pub fn forward_graph(
    g: &mut Graph,
    p: &BTreeMap<String, Var>,
    lora: Option<&LoraVars>,
    config: &ModelConfig,
    x: Var,
    rot: &PairRotation,
    t: &[f32],
    layout: &SeqLayout,
) -> Result<Var> {
    let cx = Ctx { p, lora };
    let d = config.d_model();
    let seq = layout.seq();
    shape_check!(
        t.len() == layout.batch,
        "{} timesteps for a batch of {}",
        t.len(),
        layout.batch
    );
    shape_check!(
        g.value(x).shape() == [layout.batch * seq, d],
        "input {:?} for {} sequences of {} x {}",
        g.value(x).shape(),
        layout.batch,
        seq,
        d
    );
    let feats: Vec<f32> = t.iter().flat_map(|&ti| timestep_features(ti)).collect();
    let feats = g.constant(Tensor::new(vec![layout.batch, TIME_FEATURES], feats)?);
    let h = cx.dense(g, feats, "t_embed.fc1")?;
    let h = g.silu(h);
    let temb = cx.dense(g, h, "t_embed.fc2")?;
    let cond = g.silu(temb);

    let mut x = x;
    for b in 0..config.n_blocks {
        let pre = format!("blocks.{b}");
        let m = cx.dense(g, cond, &format!("{pre}.mod"))?;
        let m = g.repeat_rows(m, seq);
        let mut chunk = |i: usize| g.slice_cols(m, i * d, d);
        let (sh1, sc1, g1, sh2, sc2, g2) = (
            chunk(0)?,
            chunk(1)?,
            chunk(2)?,
            chunk(3)?,
            chunk(4)?,
            chunk(5)?,
        );

        let hn = modulate(g, x, sh1, sc1)?;
        let q = cx.dense(g, hn, &format!("{pre}.attn.q"))?;
        let k = cx.dense(g, hn, &format!("{pre}.attn.k"))?;
        let v = cx.dense(g, hn, &format!("{pre}.attn.v"))?;
        let q = g.rotate_pairs(q, rot)?;
        let k = g.rotate_pairs(k, rot)?;
        let a = g.attention(q, k, v, config.n_heads, seq)?;
        let a = cx.dense(g, a, &format!("{pre}.attn.o"))?;
        let a = g.mul(a, g1)?;
        x = g.add(x, a)?;

        let hn = modulate(g, x, sh2, sc2)?;
        let f = cx.dense(g, hn, &format!("{pre}.mlp.fc1"))?;
        let f = g.gelu(f);
        let f = cx.dense(g, f, &format!("{pre}.mlp.fc2"))?;
        let f = g.mul(f, g2)?;
        x = g.add(x, f)?;
    }
    let m = cx.dense(g, cond, "final.mod")?;
    let m = g.repeat_rows(m, seq);
    let shift = g.slice_cols(m, 0, d)?;
    let scale = g.slice_cols(m, d, d)?;
    let hn = modulate(g, x, shift, scale)?;
    let spatial = g.gather_rows(hn, &layout.spatial_rows())?;
    cx.dense(g, spatial, "final.out")
}

/// Rotation for a batch: one table per sample followed by `text` identity rows.
pub fn batch_rotation(tables: &[&RopeTable], text: usize) -> Result<PairRotation> {
    RopeTable::stack(tables, text)
}

/// Fused streams for a batch on a graph: `[batch * seq, d_model]`, spatial
/// tokens then text tokens per sample. `text_ids` holds `batch * text` ids.
pub fn fuse_batch(
    g: &mut Graph,
    p: &BTreeMap<String, Var>,
    noise: Var,
    image: Var,
    mask: Var,
    text_ids: &[usize],
    layout: &SeqLayout,
) -> Result<Var> {
    shape_check!(
        text_ids.len() == layout.batch * layout.text,
        "{} text ids",
        text_ids.len()
    );
    let spatial = streams::fuse_spatial(g, p, noise, image, mask)?;
    let embed = p
        .get(TEXT_EMBED)
        .copied()
        .ok_or_else(|| crate::Error::MissingParam(TEXT_EMBED.into()))?;
    let vocab = g.value(embed).rows();
    for &id in text_ids {
        contract!(
            id < vocab,
            "token id {} outside a vocabulary of {}",
            id,
            vocab
        );
    }
    let text = g.gather_rows(embed, text_ids)?;
    let all = g.concat_rows(&[spatial, text])?;
    g.gather_rows(all, &layout.interleave())
}

/// Velocity for already fused `tokens: [n + k, d_model]` whose first `n` rows
/// sit at `positions`.
pub fn forward(
    tokens: &Tensor,
    positions: &PositionGrid,
    t: f32,
    config: &ModelConfig,
    params: &Params,
    adapter: Option<&LoraAdapter>,
) -> Result<Tensor> {
    config.validate()?;
    contract!((0.0..=1.0).contains(&t), "t = {} outside [0, 1]", t);
    let n = positions.token_count();
    shape_check!(
        tokens.rows() >= n && tokens.cols() == config.d_model(),
        "{:?} tokens for {} positions and width {}",
        tokens.shape(),
        n,
        config.d_model()
    );
    let layout = SeqLayout {
        batch: 1,
        spatial: n,
        text: tokens.rows() - n,
    };
    let table = rope_tables(positions, config.head_dim, config.rope_base)?;
    let rot = batch_rotation(&[&table], layout.text)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let lora = adapter.map(|a| LoraVars::bind(&mut g, a, false));
    let x = g.constant(tokens.clone());
    let out = forward_graph(&mut g, &p, lora.as_ref(), config, x, &rot, &[t], &layout)?;
    Ok(g.value(out).clone())
}

/// Fuses `streams` and predicts the velocity in one pass. `text_ids` replaces
/// `streams.text` with rows of the parameter embedding table.
pub fn predict_velocity(
    streams: &TokenStreams,
    text_ids: &[usize],
    positions: &PositionGrid,
    t: f32,
    config: &ModelConfig,
    params: &Params,
    adapter: Option<&LoraAdapter>,
) -> Result<Tensor> {
    config.validate()?;
    let n = positions.token_count();
    shape_check!(
        streams.token_count() == n,
        "{} tokens for {} positions",
        streams.token_count(),
        n
    );
    let layout = SeqLayout {
        batch: 1,
        spatial: n,
        text: text_ids.len(),
    };
    let table = rope_tables(positions, config.head_dim, config.rope_base)?;
    let rot = batch_rotation(&[&table], layout.text)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, |_| false);
    let lora = adapter.map(|a| LoraVars::bind(&mut g, a, false));
    let noise = g.constant(streams.noise.clone());
    let image = g.constant(streams.image.clone());
    let mask = g.constant(streams.mask.clone());
    let x = fuse_batch(&mut g, &p, noise, image, mask, text_ids, &layout)?;
    let out = forward_graph(&mut g, &p, lora.as_ref(), config, x, &rot, &[t], &layout)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng::RandomStream;
    use crate::rope::build_grid_positions;
    use nalgebra::DMatrix;

    fn small() -> ModelConfig {
        ModelConfig {
            streams: StreamConfig {
                patch: 2,
                c_noise: 4,
                c_image: 4,
                c_mask: 4,
                d_model: 32,
            },
            n_blocks: 2,
            n_heads: 2,
            head_dim: 16,
            mlp_ratio: 2.0,
            vocab: 3,
            rope_base: DEFAULT_BASE,
        }
    }

    fn inputs(cfg: &ModelConfig, h: usize, w: usize) -> (Tensor, PositionGrid) {
        let tokens = gaussian(9, 1, &[h * w + 1, cfg.d_model()]);
        (tokens, build_grid_positions(h, w, (0.0, 0.0)).unwrap())
    }

    #[test]
    fn config_validation() {
        ModelConfig::toy().validate().unwrap();
        assert_eq!(ModelConfig::toy().d_model(), 128);
        let mut c = small();
        c.head_dim = 15;
        assert!(c.validate().is_err());
        let mut c = small();
        c.head_dim = 6;
        c.n_heads = 5;
        c.streams.d_model = 30;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_velocity() {
        let cfg = small();
        let p: Params = init_params(&cfg, 1)
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        let (x, pos) = inputs(&cfg, 3, 3);
        let out = forward(&x, &pos, 0.5, &cfg, &p, None).unwrap();
        assert_eq!(out.shape(), &[9, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permutation_equivariance() {
        let cfg = small();
        let p = init_params(&cfg, 2).unwrap();
        let (x, pos) = inputs(&cfg, 3, 4);
        let base = forward(&x, &pos, 0.3, &cfg, &p, None).unwrap();
        let mut r = RandomStream::new(3, 0);
        for _ in 0..5 {
            let mut perm: Vec<usize> = (0..12).collect();
            for i in (1..12).rev() {
                perm.swap(i, r.below(i + 1));
            }
            let mut rows = perm.clone();
            rows.push(12);
            let out = forward(
                &x.gather_rows(&rows).unwrap(),
                &pos.permuted(&perm),
                0.3,
                &cfg,
                &p,
                None,
            )
            .unwrap();
            let expect = base.gather_rows(&perm).unwrap();
            let scale = expect.data().iter().fold(0.0f32, |m, v| m.max(v.abs()));
            assert!(out.max_abs_diff(&expect) <= 1e-4 * scale);
        }
    }

    #[test]
    fn positions_matter() {
        let cfg = small();
        let p = init_params(&cfg, 2).unwrap();
        let (x, pos) = inputs(&cfg, 3, 3);
        let shifted =
            PositionGrid::from_coords(pos.coords().iter().map(|&(y, x)| (x, y)).collect()).unwrap();
        let a = forward(&x, &pos, 0.3, &cfg, &p, None).unwrap();
        let b = forward(&x, &shifted, 0.3, &cfg, &p, None).unwrap();
        assert!(a.max_abs_diff(&b) > 1e-4);
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let cfg = small();
        let p = init_params(&cfg, 2).unwrap();
        let (x, pos) = inputs(&cfg, 3, 3);
        assert!(forward(&x, &pos, 1.5, &cfg, &p, None).is_err());
        let short = build_grid_positions(4, 4, (0.0, 0.0)).unwrap();
        assert!(forward(&x, &short, 0.5, &cfg, &p, None).is_err());
    }

    #[test]
    fn fresh_adapter_is_a_no_op() {
        let cfg = small();
        let p = init_params(&cfg, 4).unwrap();
        let a = attach_lora(&p, &attention_projections(&cfg), 2, 2.0, 5).unwrap();
        assert_eq!(a.factors.len(), 8);
        let (x, pos) = inputs(&cfg, 2, 3);
        let plain = forward(&x, &pos, 0.7, &cfg, &p, None).unwrap();
        let with = forward(&x, &pos, 0.7, &cfg, &p, Some(&a)).unwrap();
        assert!(plain.bit_eq(&with));
        assert_eq!(merge_lora(&p, &a).unwrap(), p);
    }

    fn trained_like(a: &LoraAdapter, seed: u64) -> LoraAdapter {
        let mut a = a.clone();
        for (i, (_, (_, b))) in a.factors.iter_mut().enumerate() {
            *b = gaussian(seed, i as u64, b.shape()).scale(0.1);
        }
        a
    }

    #[test]
    fn merged_matches_runtime_adapter() {
        let cfg = small();
        let p = init_params(&cfg, 4).unwrap();
        let a = trained_like(
            &attach_lora(&p, &attention_projections(&cfg), 3, 3.0, 5).unwrap(),
            6,
        );
        let (x, pos) = inputs(&cfg, 3, 3);
        let runtime = forward(&x, &pos, 0.4, &cfg, &p, Some(&a)).unwrap();
        let merged = forward(&x, &pos, 0.4, &cfg, &merge_lora(&p, &a).unwrap(), None).unwrap();
        assert!(runtime.max_abs_diff(&merged) <= 1e-5);
        assert!(!runtime.bit_eq(&forward(&x, &pos, 0.4, &cfg, &p, None).unwrap()));
    }

    #[test]
    fn merging_twice_doubles_the_delta() {
        let cfg = small();
        let p = init_params(&cfg, 4).unwrap();
        let a = trained_like(
            &attach_lora(&p, &attention_projections(&cfg), 2, 2.0, 5).unwrap(),
            7,
        );
        let twice = merge_lora(&merge_lora(&p, &a).unwrap(), &a).unwrap();
        for layer in a.factors.keys() {
            let d = twice
                .get(layer)
                .unwrap()
                .sub(p.get(layer).unwrap())
                .unwrap();
            assert!(d.max_abs_diff(&a.delta(layer).unwrap().scale(2.0)) < 1e-5);
        }
    }

    #[test]
    fn delta_rank_is_bounded() {
        let cfg = ModelConfig::toy();
        let p = init_params(&cfg, 4).unwrap();
        let layer = "blocks.0.attn.q.w".to_string();
        let a = trained_like(
            &attach_lora(&p, std::slice::from_ref(&layer), 4, 4.0, 5).unwrap(),
            8,
        );
        let d = a.delta(&layer).unwrap();
        assert_eq!(d.shape(), &[128, 128]);
        let m = DMatrix::from_row_slice(
            128,
            128,
            &d.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
        );
        assert_eq!(m.rank(1e-6 * m.norm()), 4);
    }

    #[test]
    fn lora_validation() {
        let cfg = small();
        let p = init_params(&cfg, 4).unwrap();
        assert!(attach_lora(&p, &attention_projections(&cfg), 0, 1.0, 1).is_err());
        assert!(attach_lora(&p, &attention_projections(&cfg), 33, 1.0, 1).is_err());
        assert!(attach_lora(&p, &["blocks.0.mlp.fc1.w".to_string()], 2, 1.0, 1).is_err());
        let big = ModelConfig::toy();
        let pb = init_params(&big, 1).unwrap();
        assert!(attach_lora(&pb, &attention_projections(&big), 32, 32.0, 1).is_ok());
    }

    #[test]
    fn adapter_file_round_trip() {
        let cfg = small();
        let p = init_params(&cfg, 4).unwrap();
        let a = trained_like(
            &attach_lora(&p, &attention_projections(&cfg), 2, 2.0, 5).unwrap(),
            9,
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapter.pbw");
        a.save(&path).unwrap();
        assert_eq!(LoraAdapter::load(&path).unwrap(), a);
    }

    #[test]
    fn timestep_features_are_deterministic_and_distinct() {
        assert_eq!(timestep_features(0.25), timestep_features(0.25));
        assert_ne!(timestep_features(0.25), timestep_features(0.5));
        assert_eq!(timestep_features(0.0)[0], 1.0);
    }

    #[test]
    fn seq_layout_interleaving() {
        let l = SeqLayout {
            batch: 2,
            spatial: 2,
            text: 1,
        };
        assert_eq!(l.interleave(), vec![0, 1, 4, 2, 3, 5]);
        assert_eq!(l.spatial_rows(), vec![0, 1, 3, 4]);
    }

    #[test]
    fn predict_matches_fuse_then_forward() {
        let cfg = small();
        let p = init_params(&cfg, 4).unwrap();
        let pos = build_grid_positions(2, 2, (0.0, 0.0)).unwrap();
        let s = TokenStreams {
            noise: gaussian(1, 1, &[4, 4]),
            image: gaussian(1, 2, &[4, 12]),
            mask: Tensor::zeros(&[4, 4]),
            text: streams::encode_text(&[1], p.get(TEXT_EMBED).unwrap()).unwrap(),
        };
        let fused = streams::fuse(&s, &cfg.streams, &p).unwrap();
        let a = forward(&fused, &pos, 0.2, &cfg, &p, None).unwrap();
        let b = predict_velocity(&s, &[1], &pos, 0.2, &cfg, &p, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }
}
