//! Small image encoders used as similarity metrics: a supervised classifier's
//! penultimate features and an augmentation-invariance (contrastive) encoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{suppress, WorldGeometry};
use super::render::{render_sample, ShapeSpec, NUM_CLASSES};
use crate::error::{contract, Error, Result};
use crate::numkit::rng::{gaussian, label_id, RandomStream};
use crate::numkit::{clip_grad_norm, weights, Adam, AdamConfig, Graph, Params, Tensor, Var};
use crate::raster::{Mask, Raster, Rect};

/// Side of the square crops the encoders read.
pub const CROP: usize = 16;
const HIDDEN: usize = 128;
const FEATURES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Supervised classifier features.
    ClipLike,
    /// Contrastive features.
    DinoLike,
}

impl EncoderKind {
    pub fn file_name(self) -> &'static str {
        match self {
            EncoderKind::ClipLike => "clip_like.pbw",
            EncoderKind::DinoLike => "dino_like.pbw",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureEncoder {
    pub kind: EncoderKind,
    pub params: Params,
}

fn crop_input(img: &Raster) -> Vec<f32> {
    let img = if img.dims() == (CROP, CROP) {
        img.clone()
    } else {
        img.resize(CROP, CROP)
    };
    img.to_unit().into_iter().map(|v| v - 0.5).collect()
}

fn init(kind: EncoderKind, seed: u64) -> Params {
    let d = 3 * CROP * CROP;
    let mut p = Params::new();
    let mut dense = |name: &str, i: usize, o: usize| {
        p.insert(
            format!("{name}.w"),
            gaussian(seed, label_id(name), &[i, o]).scale((2.0 / i as f32).sqrt()),
        );
        p.insert(format!("{name}.b"), Tensor::zeros(&[o]));
    };
    dense("fc1", d, HIDDEN);
    dense("fc2", HIDDEN, FEATURES);
    if kind == EncoderKind::ClipLike {
        dense("head", FEATURES, NUM_CLASSES);
    }
    p
}

fn features_graph(
    g: &mut Graph,
    p: &std::collections::BTreeMap<String, Var>,
    x: Var,
) -> Result<Var> {
    let h = g.linear(x, p["fc1.w"], Some(p["fc1.b"]))?;
    let h = g.relu(h);
    g.linear(h, p["fc2.w"], Some(p["fc2.b"]))
}

impl FeatureEncoder {
    /// Unit feature rows for a batch of crops.
    pub fn embed(&self, crops: &[Raster]) -> Result<Tensor> {
        contract!(!crops.is_empty(), "no crops to embed");
        let data: Vec<f32> = crops.iter().flat_map(crop_input).collect();
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, |_| false);
        let x = g.constant(Tensor::new(vec![crops.len(), 3 * CROP * CROP], data)?);
        let f = features_graph(&mut g, &p, x)?;
        let f = g.l2_normalize_rows(f);
        Ok(g.value(f).clone())
    }

    pub fn feature(&self, crop: &Raster) -> Result<Vec<f32>> {
        Ok(self.embed(std::slice::from_ref(crop))?.into_data())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        weights::save(&self.params, dir.join(self.kind.file_name()))
    }

    pub fn load(dir: &Path, kind: EncoderKind) -> Result<Self> {
        Ok(Self {
            kind,
            params: weights::load(dir.join(kind.file_name()))?,
        })
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f32>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean of unit features; the order of `features` does not matter beyond
/// floating-point summation.
pub fn prototype(features: &[Vec<f32>]) -> Vec<f32> {
    let n = features.len().max(1) as f32;
    let d = features.first().map_or(0, Vec::len);
    (0..d)
        .map(|j| features.iter().map(|f| f[j]).sum::<f32>() / n)
        .collect()
}

/// Two views of one glyph: the reference-slot style (object fitted on black)
/// and the scene style (object over its textured background).
pub fn sample_views(
    geom: &WorldGeometry,
    class_id: usize,
    rng: &mut RandomStream,
) -> Result<(Raster, Raster)> {
    let reference = geom.random_reference(class_id, rng)?;
    let (img, mask) = reference.fit_to_slot(CROP, CROP)?;
    let slot_view = suppress(&img, &mask.inverted());
    let spec = ShapeSpec::random(class_id, rng, (0.3 * CROP as f64, 0.46 * CROP as f64), 0.08);
    let (scene, _) = render_sample(&spec, (CROP, CROP), rng.below(1 << 30) as u64)?;
    Ok((slot_view, scene))
}

fn jitter(img: &Raster, rng: &mut RandomStream) -> Raster {
    let gain = rng.uniform_range(0.85, 1.15);
    let (dy, dx) = (rng.below(3) as isize - 1, rng.below(3) as isize - 1);
    let (h, w) = img.dims();
    Raster::from_fn(h, w, |y, x| {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
        img.get(sy, sx)
            .map(|v| (v as f64 * gain).round().clamp(0.0, 255.0) as u8)
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub kind: EncoderKind,
    pub accuracy: f64,
    pub within_class: f64,
    pub cross_class: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub temperature: f32,
    pub held_out: usize,
    pub min_accuracy: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch: 64,
            lr: 2e-3,
            temperature: 0.1,
            held_out: 20,
            min_accuracy: 0.9,
        }
    }
}

/// Trains one encoder and checks nearest-prototype accuracy on held-out renders.
pub fn train_feature_encoder(
    geom: &WorldGeometry,
    kind: EncoderKind,
    config: &EncoderConfig,
    seed: u64,
) -> Result<(FeatureEncoder, EncoderReport)> {
    let mut params = init(kind, seed);
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..AdamConfig::default()
    });
    let mut rng = RandomStream::labeled(seed, "encoder/data");
    for _ in 0..config.steps {
        let mut inputs = Vec::with_capacity(2 * config.batch);
        let mut labels = Vec::with_capacity(config.batch);
        let mut second = Vec::with_capacity(config.batch);
        for _ in 0..config.batch {
            let c = rng.below(NUM_CLASSES);
            let (a, b) = sample_views(geom, c, &mut rng)?;
            let (a, b) = if rng.uniform() < 0.5 { (a, b) } else { (b, a) };
            inputs.extend(crop_input(&jitter(&a, &mut rng)));
            second.extend(crop_input(&jitter(&b, &mut rng)));
            labels.push(c);
        }
        let mut g = Graph::new();
        let p = params.bind(&mut g, |_| true);
        let loss = match kind {
            EncoderKind::ClipLike => {
                inputs.extend(second);
                let x = g.constant(Tensor::new(
                    vec![2 * config.batch, 3 * CROP * CROP],
                    inputs,
                )?);
                let f = features_graph(&mut g, &p, x)?;
                let f = g.relu(f);
                let logits = g.linear(f, p["head.w"], Some(p["head.b"]))?;
                let both: Vec<usize> = labels.iter().chain(&labels).copied().collect();
                g.cross_entropy(logits, &both)?
            }
            EncoderKind::DinoLike => {
                let n = config.batch;
                let xa = g.constant(Tensor::new(vec![n, 3 * CROP * CROP], inputs)?);
                let xb = g.constant(Tensor::new(vec![n, 3 * CROP * CROP], second)?);
                let fa = features_graph(&mut g, &p, xa)?;
                let fb = features_graph(&mut g, &p, xb)?;
                let fa = g.l2_normalize_rows(fa);
                let fb = g.l2_normalize_rows(fb);
                let sim = g.matmul_t(fa, fb, false, true)?;
                let logits = g.scale(sim, 1.0 / config.temperature);
                let diag: Vec<usize> = (0..n).collect();
                g.cross_entropy(logits, &diag)?
            }
        };
        let lv = g.value(loss).item()?;
        if !lv.is_finite() {
            return Err(Error::Training(format!("encoder loss became {lv}")));
        }
        let mut grads = g.backward(loss)?.into_named(&g);
        clip_grad_norm(&mut grads, 5.0);
        adam.step(&mut params, &grads, 1.0)?;
    }
    let encoder = FeatureEncoder { kind, params };
    let report = evaluate_encoder(&encoder, geom, config.held_out, seed)?;
    if report.accuracy < config.min_accuracy {
        return Err(Error::Quality(format!(
            "{:?} encoder retrieval accuracy {:.3} below {:.2}",
            kind, report.accuracy, config.min_accuracy
        )));
    }
    Ok((encoder, report))
}

/// Nearest-prototype accuracy and mean within/cross-class cosine on fresh
/// renders. Prototypes come from four reference-style crops per class.
pub fn evaluate_encoder(
    encoder: &FeatureEncoder,
    geom: &WorldGeometry,
    per_class: usize,
    seed: u64,
) -> Result<EncoderReport> {
    let mut rng = RandomStream::labeled(seed, "encoder/held-out");
    let mut protos = Vec::new();
    for c in 0..NUM_CLASSES {
        let crops = (0..4)
            .map(|_| sample_views(geom, c, &mut rng).map(|v| v.0))
            .collect::<Result<Vec<_>>>()?;
        let f = encoder.embed(&crops)?;
        protos.push(prototype(
            &(0..4).map(|r| f.row(r).to_vec()).collect::<Vec<_>>(),
        ));
    }
    let mut feats = Vec::new();
    for c in 0..NUM_CLASSES {
        for i in 0..per_class {
            let (a, b) = sample_views(geom, c, &mut rng)?;
            let f = encoder.feature(if i % 2 == 0 { &a } else { &b })?;
            feats.push((c, f));
        }
    }
    let correct = feats
        .iter()
        .filter(|(c, f)| {
            let best = (0..NUM_CLASSES)
                .max_by(|&a, &b| cosine(f, &protos[a]).total_cmp(&cosine(f, &protos[b])))
                .unwrap_or(0);
            best == *c
        })
        .count();
    let (mut within, mut nw, mut cross, mut nc) = (0.0, 0usize, 0.0, 0usize);
    for (i, (ci, fi)) in feats.iter().enumerate() {
        for (cj, fj) in &feats[i + 1..] {
            let s = cosine(fi, fj) as f64;
            if ci == cj {
                within += s;
                nw += 1;
            } else {
                cross += s;
                nc += 1;
            }
        }
    }
    Ok(EncoderReport {
        kind: encoder.kind,
        accuracy: correct as f64 / feats.len().max(1) as f64,
        within_class: within / nw.max(1) as f64,
        cross_class: cross / nc.max(1) as f64,
    })
}

/// Crop of `image` under the bounding box of `mask`, for scoring.
pub fn masked_crop(image: &Raster, mask: &Mask) -> Result<Raster> {
    let bbox: Rect = mask
        .bbox()
        .ok_or_else(|| Error::Contract("score mask is empty".into()))?;
    image.crop(&bbox)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_cases() {
        assert!((cosine(&[1.0, 2.0], &[1.0, 2.0]) - 1.0).abs() < 1e-6);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn prototype_is_order_invariant() {
        let f = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        let mut r = f.clone();
        r.reverse();
        let (a, b) = (prototype(&f), prototype(&r));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn features_are_unit_and_self_similar() {
        let enc = FeatureEncoder {
            kind: EncoderKind::DinoLike,
            params: init(EncoderKind::DinoLike, 1),
        };
        let g = WorldGeometry::default();
        let mut rng = RandomStream::new(1, 0);
        let (a, _) = sample_views(&g, 3, &mut rng).unwrap();
        let f = enc.feature(&a).unwrap();
        assert!((f.iter().map(|v| v * v).sum::<f32>() - 1.0).abs() < 1e-5);
        assert!((cosine(&f, &enc.feature(&a).unwrap()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn empty_mask_rejected() {
        assert!(masked_crop(&Raster::new(4, 4), &Mask::new(4, 4)).is_err());
    }
}
