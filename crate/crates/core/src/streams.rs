//! The four conditioning streams (noise, masked image, mask, text) and their
//! fusion into the transformer's token sequence.
//!
//! A fixed linear codec stands in for the image autoencoder: each patch is
//! projected onto its leading principal components and whitened, so the noise
//! stream and the model's velocity live in `c_noise` channels per token.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{contract, shape_check, Result};
use crate::numkit::rng::{gaussian, label_id};
use crate::numkit::{Graph, Params, Tensor, Var};
use crate::raster::{Mask, Raster};

pub const FULL_PATCH: usize = 16;
pub const FULL_C_NOISE: usize = 64;
pub const FULL_C_IMAGE: usize = 64;
pub const FULL_C_MASK: usize = 256;
pub const FULL_D_MODEL: usize = 3072;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub patch: usize,
    pub c_noise: usize,
    pub c_image: usize,
    pub c_mask: usize,
    pub d_model: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl StreamConfig {
    pub fn toy() -> Self {
        Self {
            patch: 4,
            c_noise: 8,
            c_image: 8,
            c_mask: 16,
            d_model: 128,
        }
    }

    /// Channel widths of the full-scale fill model. Only used for arithmetic checks.
    pub fn full_scale() -> Self {
        Self {
            patch: FULL_PATCH,
            c_noise: FULL_C_NOISE,
            c_image: FULL_C_IMAGE,
            c_mask: FULL_C_MASK,
            d_model: FULL_D_MODEL,
        }
    }

    pub fn fused_width(&self) -> usize {
        self.c_noise + self.c_image + self.c_mask
    }

    /// Raw values per patch before the image projection.
    pub fn patch_values(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.patch >= 1, "patch must be positive");
        contract!(
            self.c_mask == self.patch * self.patch,
            "c_mask {} must equal patch^2 = {}",
            self.c_mask,
            self.patch * self.patch
        );
        contract!(
            self.c_noise >= 1 && self.c_image >= 1 && self.d_model >= 1,
            "stream widths must be positive"
        );
        contract!(
            self.c_noise <= self.patch_values(),
            "c_noise {} exceeds the {} values of a patch",
            self.c_noise,
            self.patch_values()
        );
        Ok(())
    }
}

/// Per-token streams over one token set. `image` holds raw patch values; the
/// learned projection to `c_image` happens in [`fuse`].
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStreams {
    pub noise: Tensor,
    pub image: Tensor,
    pub mask: Tensor,
    /// `[k, d_model]` global conditioning rows, appended after the spatial tokens.
    pub text: Tensor,
}

impl TokenStreams {
    pub fn token_count(&self) -> usize {
        self.noise.rows()
    }

    pub fn validate(&self, config: &StreamConfig) -> Result<()> {
        let n = self.noise.rows();
        shape_check!(
            self.image.rows() == n && self.mask.rows() == n,
            "spatial streams disagree on token count: {}, {}, {}",
            n,
            self.image.rows(),
            self.mask.rows()
        );
        shape_check!(
            self.noise.cols() == config.c_noise,
            "noise stream width {}",
            self.noise.cols()
        );
        shape_check!(
            self.image.cols() == config.patch_values(),
            "image stream width {}",
            self.image.cols()
        );
        shape_check!(
            self.mask.cols() == config.c_mask,
            "mask stream width {}",
            self.mask.cols()
        );
        shape_check!(
            self.text.rows() >= 1 && self.text.cols() == config.d_model,
            "text stream {:?} for d_model {}",
            self.text.shape(),
            config.d_model
        );
        Ok(())
    }

    /// Same token subset of every spatial stream.
    pub fn gather(&self, idx: &[usize]) -> Result<TokenStreams> {
        Ok(TokenStreams {
            noise: self.noise.gather_rows(idx)?,
            image: self.image.gather_rows(idx)?,
            mask: self.mask.gather_rows(idx)?,
            text: self.text.clone(),
        })
    }
}

pub fn noise_stream_id() -> u64 {
    label_id("stream/noise")
}

pub fn encode_noise(seed: u64, token_count: usize, c_noise: usize) -> Result<Tensor> {
    contract!(token_count >= 1, "noise stream needs at least one token");
    Ok(gaussian(seed, noise_stream_id(), &[token_count, c_noise]))
}

fn check_aligned(h: usize, w: usize, patch: usize) -> Result<()> {
    contract!(
        patch >= 1 && h.is_multiple_of(patch) && w.is_multiple_of(patch) && h > 0 && w > 0,
        "{}x{} raster is not aligned to patch {}",
        h,
        w,
        patch
    );
    Ok(())
}

/// `[tokens, 3 * patch^2]` unit values, tokens row-major, each patch row-major
/// with interleaved channels.
pub fn patchify(raster: &Raster, patch: usize) -> Result<Tensor> {
    let (h, w) = raster.dims();
    check_aligned(h, w, patch)?;
    let (th, tw) = (h / patch, w / patch);
    let unit = raster.to_unit();
    let pv = 3 * patch * patch;
    let mut data = Vec::with_capacity(th * tw * pv);
    for ty in 0..th {
        for tx in 0..tw {
            for py in 0..patch {
                let start = ((ty * patch + py) * w + tx * patch) * 3;
                data.extend_from_slice(&unit[start..start + 3 * patch]);
            }
        }
    }
    Tensor::new(vec![th * tw, pv], data)
}

/// Inverse of [`patchify`]; values are clamped to `[0, 1]` and rounded.
pub fn unpatchify(tokens: &Tensor, height: usize, width: usize, patch: usize) -> Result<Raster> {
    check_aligned(height, width, patch)?;
    let (th, tw) = (height / patch, width / patch);
    shape_check!(
        tokens.rows() == th * tw && tokens.cols() == 3 * patch * patch,
        "{:?} tokens for a {}x{} raster",
        tokens.shape(),
        height,
        width
    );
    let mut unit = vec![0.0; height * width * 3];
    for ty in 0..th {
        for tx in 0..tw {
            let row = tokens.row(ty * tw + tx);
            for py in 0..patch {
                let start = ((ty * patch + py) * width + tx * patch) * 3;
                unit[start..start + 3 * patch]
                    .copy_from_slice(&row[py * 3 * patch..(py + 1) * 3 * patch]);
            }
        }
    }
    Raster::from_unit(height, width, &unit)
}

/// Patchified canvas with pixels under `edit_mask` or `ref_background` zeroed.
pub fn encode_masked_image(
    canvas: &Raster,
    edit_mask: &Mask,
    ref_background: &Mask,
    patch: usize,
) -> Result<Tensor> {
    let dims = canvas.dims();
    contract!(
        edit_mask.dims() == dims && ref_background.dims() == dims,
        "canvas {:?}, edit mask {:?} and reference mask {:?} differ",
        dims,
        edit_mask.dims(),
        ref_background.dims()
    );
    let hidden = edit_mask.union(ref_background);
    let mut masked = canvas.clone();
    for y in 0..dims.0 {
        for x in 0..dims.1 {
            if hidden.get(y, x) {
                masked.set(y, x, [0, 0, 0]);
            }
        }
    }
    patchify(&masked, patch)
}

/// One channel per pixel of each patch, row-major, 1.0 where the mask is set.
pub fn encode_mask(mask: &Mask, patch: usize) -> Result<Tensor> {
    let (h, w) = mask.dims();
    check_aligned(h, w, patch)?;
    let (th, tw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(h * w);
    for ty in 0..th {
        for tx in 0..tw {
            for py in 0..patch {
                for px in 0..patch {
                    data.push(if mask.get(ty * patch + py, tx * patch + px) {
                        1.0
                    } else {
                        0.0
                    });
                }
            }
        }
    }
    Tensor::new(vec![th * tw, patch * patch], data)
}

/// Inverse of [`encode_mask`]; channels above 0.5 are set.
pub fn decode_mask(stream: &Tensor, height: usize, width: usize, patch: usize) -> Result<Mask> {
    check_aligned(height, width, patch)?;
    let tw = width / patch;
    shape_check!(
        stream.rows() == (height / patch) * tw && stream.cols() == patch * patch,
        "mask stream {:?} for a {}x{} mask",
        stream.shape(),
        height,
        width
    );
    Ok(Mask::from_fn(height, width, |y, x| {
        stream.row((y / patch) * tw + x / patch)[(y % patch) * patch + x % patch] > 0.5
    }))
}

pub const IMAGE_PROJ_W: &str = "stream.image_proj.w";
pub const IMAGE_PROJ_B: &str = "stream.image_proj.b";
pub const FUSE_W: &str = "stream.fuse.w";
pub const FUSE_B: &str = "stream.fuse.b";
pub const TEXT_EMBED: &str = "text.embed";

/// Spatial half of the fusion on a graph: `[noise | image_proj(image) | mask]`
/// projected to `d_model`.
pub fn fuse_spatial(
    g: &mut Graph,
    p: &std::collections::BTreeMap<String, Var>,
    noise: Var,
    image: Var,
    mask: Var,
) -> Result<Var> {
    let get = |n: &str| {
        p.get(n)
            .copied()
            .ok_or_else(|| crate::Error::MissingParam(n.into()))
    };
    let img = g.linear(image, get(IMAGE_PROJ_W)?, Some(get(IMAGE_PROJ_B)?))?;
    let cat = g.concat_cols(&[noise, img, mask])?;
    g.linear(cat, get(FUSE_W)?, Some(get(FUSE_B)?))
}

/// `[n + k, d_model]`: fused spatial tokens followed by the untouched text rows.
pub fn fuse(streams: &TokenStreams, config: &StreamConfig, projection: &Params) -> Result<Tensor> {
    config.validate()?;
    streams.validate(config)?;
    let fw = projection.get(FUSE_W)?;
    contract!(
        fw.shape() == [config.fused_width(), config.d_model],
        "fusion weight {:?} does not map {} channels to {}",
        fw.shape(),
        config.fused_width(),
        config.d_model
    );
    let mut g = Graph::new();
    let vars = projection.bind(&mut g, |_| false);
    let noise = g.constant(streams.noise.clone());
    let image = g.constant(streams.image.clone());
    let mask = g.constant(streams.mask.clone());
    let spatial = fuse_spatial(&mut g, &vars, noise, image, mask)?;
    Tensor::concat_rows(&[g.value(spatial), &streams.text])
}

/// Fresh projection parameters (and an embedding table of `vocab` rows).
pub fn init_projection(config: &StreamConfig, vocab: usize, seed: u64) -> Result<Params> {
    config.validate()?;
    let pv = config.patch_values();
    let mut p = Params::new();
    let w = |label: &str, shape: &[usize], fan_in: usize| {
        gaussian(seed, label_id(label), shape).scale(1.0 / (fan_in as f32).sqrt())
    };
    p.insert(IMAGE_PROJ_W, w(IMAGE_PROJ_W, &[pv, config.c_image], pv));
    p.insert(IMAGE_PROJ_B, Tensor::zeros(&[config.c_image]));
    p.insert(
        FUSE_W,
        w(
            FUSE_W,
            &[config.fused_width(), config.d_model],
            config.fused_width(),
        ),
    );
    p.insert(FUSE_B, Tensor::zeros(&[config.d_model]));
    p.insert(
        TEXT_EMBED,
        gaussian(seed, label_id(TEXT_EMBED), &[vocab, config.d_model]).scale(0.02),
    );
    Ok(p)
}

/// One conditioning row per prompt token.
pub fn encode_text(ids: &[usize], table: &Tensor) -> Result<Tensor> {
    contract!(!ids.is_empty(), "prompt has no tokens");
    for &id in ids {
        contract!(
            id < table.rows(),
            "token id {} outside a vocabulary of {}",
            id,
            table.rows()
        );
    }
    table.gather_rows(ids)
}

pub const CODEC_MEAN: &str = "codec.mean";
pub const CODEC_ENC: &str = "codec.enc";
pub const CODEC_DEC: &str = "codec.dec";

/// Fixed per-patch linear codec: whitened leading principal components.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCodec {
    pub patch: usize,
    /// `[3 p^2]`
    pub mean: Tensor,
    /// `[3 p^2, c]`
    pub enc: Tensor,
    /// `[c, 3 p^2]`
    pub dec: Tensor,
}

impl LatentCodec {
    /// Fits `channels` components to the patches of `images`.
    pub fn fit(images: &[Raster], patch: usize, channels: usize) -> Result<Self> {
        contract!(!images.is_empty(), "codec needs at least one image");
        let pv = 3 * patch * patch;
        contract!(
            channels >= 1 && channels <= pv,
            "codec width {} outside 1..={}",
            channels,
            pv
        );
        let mut rows = Vec::new();
        for img in images {
            let t = patchify(img, patch)?;
            rows.extend_from_slice(t.data());
        }
        let n = rows.len() / pv;
        contract!(n >= 2, "codec needs at least two patches");
        let x = DMatrix::<f64>::from_row_iterator(n, pv, rows.iter().map(|&v| v as f64));
        let mean = x.row_mean();
        let mut centered = x;
        for mut r in centered.row_iter_mut() {
            r -= &mean;
        }
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..pv).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .total_cmp(&eig.eigenvalues[a])
                .then(a.cmp(&b))
        });
        let mut enc = vec![0.0f32; pv * channels];
        let mut dec = vec![0.0f32; channels * pv];
        for (c, &k) in order.iter().take(channels).enumerate() {
            let mut v = eig.eigenvectors.column(k).clone_owned();
            // deterministic sign: largest-magnitude entry positive
            let imax = v.iamax();
            if v[imax] < 0.0 {
                v = -v;
            }
            let sd = eig.eigenvalues[k].max(1e-8).sqrt();
            for i in 0..pv {
                enc[i * channels + c] = (v[i] / sd) as f32;
                dec[c * pv + i] = (v[i] * sd) as f32;
            }
        }
        Ok(Self {
            patch,
            mean: Tensor::new(vec![pv], mean.iter().map(|&v| v as f32).collect())?,
            enc: Tensor::new(vec![pv, channels], enc)?,
            dec: Tensor::new(vec![channels, pv], dec)?,
        })
    }

    pub fn channels(&self) -> usize {
        self.enc.cols()
    }

    pub fn encode_patches(&self, patches: &Tensor) -> Result<Tensor> {
        let mut centered = patches.clone();
        let pv = self.mean.numel();
        shape_check!(
            patches.cols() == pv,
            "{} values per patch, codec expects {}",
            patches.cols(),
            pv
        );
        for row in centered.data_mut().chunks_mut(pv) {
            for (v, m) in row.iter_mut().zip(self.mean.data()) {
                *v -= m;
            }
        }
        centered.matmul(&self.enc)
    }

    pub fn decode_patches(&self, latent: &Tensor) -> Result<Tensor> {
        let mut out = latent.matmul(&self.dec)?;
        let pv = self.mean.numel();
        for row in out.data_mut().chunks_mut(pv) {
            for (v, m) in row.iter_mut().zip(self.mean.data()) {
                *v += m;
            }
        }
        Ok(out)
    }

    pub fn encode(&self, raster: &Raster) -> Result<Tensor> {
        self.encode_patches(&patchify(raster, self.patch)?)
    }

    pub fn decode(&self, latent: &Tensor, height: usize, width: usize) -> Result<Raster> {
        unpatchify(&self.decode_patches(latent)?, height, width, self.patch)
    }

    pub fn to_params(&self) -> Params {
        let mut p = Params::new();
        p.insert(CODEC_MEAN, self.mean.clone());
        p.insert(CODEC_ENC, self.enc.clone());
        p.insert(CODEC_DEC, self.dec.clone());
        p
    }

    pub fn from_params(p: &Params, patch: usize) -> Result<Self> {
        let codec = Self {
            patch,
            mean: p.get(CODEC_MEAN)?.clone(),
            enc: p.get(CODEC_ENC)?.clone(),
            dec: p.get(CODEC_DEC)?.clone(),
        };
        let pv = 3 * patch * patch;
        shape_check!(
            codec.mean.numel() == pv
                && codec.enc.rows() == pv
                && codec.dec.cols() == pv
                && codec.dec.rows() == codec.enc.cols(),
            "stored codec does not match patch {}",
            patch
        );
        Ok(codec)
    }
}
