//! Rectified-flow Euler sampling with a step-gated position transplant.
//!
//! Time runs from pure noise at `t = 1` to data at `t = 0`. For the first
//! `tau` steps the model sees the transplanted position grid, afterwards the
//! native one. The sampled canvas is composited so that only edit-region
//! pixels can differ from the input.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::layout::{crop_tokens, restructure_positions, CanvasLayout, ComposedCanvas, IndexMap};
use crate::mmdit::{predict_velocity, LoraAdapter, ModelConfig};
use crate::numkit::{Params, Tensor};
use crate::raster::{Mask, Raster};
use crate::rope::{transplant_all, PositionGrid, RegionMap};
use crate::streams::{encode_mask, encode_masked_image, encode_noise, LatentCodec, TokenStreams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSchedule {
    pub n_steps: usize,
    pub tau: usize,
    pub seed: u64,
    /// `t_s` for `s = 0..n_steps`, strictly decreasing from 1.
    pub timesteps: Vec<f32>,
}

pub fn make_schedule(n_steps: usize, tau: usize, seed: u64) -> Result<SamplerSchedule> {
    contract!(n_steps >= 1, "sampler needs at least one step");
    contract!(tau <= n_steps, "tau {} exceeds {} steps", tau, n_steps);
    let timesteps = (0..n_steps)
        .map(|s| (1.0 - s as f64 / n_steps as f64) as f32)
        .collect();
    Ok(SamplerSchedule {
        n_steps,
        tau,
        seed,
        timesteps,
    })
}

impl SamplerSchedule {
    pub fn gate(&self, step: usize) -> PeMode {
        if step < self.tau {
            PeMode::Transplanted
        } else {
            PeMode::Native
        }
    }

    /// Time after step `s`; the last step lands on 0.
    pub fn t_next(&self, step: usize) -> f32 {
        self.timesteps.get(step + 1).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeMode {
    Transplanted,
    Native,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiseState {
    pub latent: Tensor,
    pub step_index: usize,
    pub pe_mode: PeMode,
}

pub fn euler_step(latent: &Tensor, velocity: &Tensor, t_cur: f32, t_next: f32) -> Result<Tensor> {
    contract!(
        t_cur > t_next && t_next >= 0.0,
        "timesteps must decrease: {} -> {}",
        t_cur,
        t_next
    );
    let dt = t_next - t_cur;
    let mut out = latent.clone();
    crate::error::shape_check!(
        latent.shape() == velocity.shape(),
        "latent {:?} vs velocity {:?}",
        latent.shape(),
        velocity.shape()
    );
    for (o, v) in out.data_mut().iter_mut().zip(velocity.data()) {
        *o += dt * v;
    }
    Ok(out)
}

fn check_finite(t: &Tensor, what: &str, step: usize) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "non-finite {what} at step {step}"
        )))
    }
}

/// Runs the gated Euler loop from `latent` (the `t = 1` state). `velocity`
/// receives the current latent, the grid chosen for the step and `t`.
/// Returns the final latent and the per-step position mode.
pub fn integrate<F>(
    latent: Tensor,
    schedule: &SamplerSchedule,
    native: &PositionGrid,
    transplanted: &PositionGrid,
    mut velocity: F,
) -> Result<(Tensor, Vec<PeMode>)>
where
    F: FnMut(&DenoiseState, &PositionGrid, f32) -> Result<Tensor>,
{
    contract!(
        native.token_count() == transplanted.token_count(),
        "native and transplanted grids differ in length"
    );
    let mut state = DenoiseState {
        latent,
        step_index: 0,
        pe_mode: schedule.gate(0),
    };
    let mut trace = Vec::with_capacity(schedule.n_steps);
    for s in 0..schedule.n_steps {
        state.step_index = s;
        state.pe_mode = schedule.gate(s);
        let grid = match state.pe_mode {
            PeMode::Transplanted => transplanted,
            PeMode::Native => native,
        };
        let t = schedule.timesteps[s];
        let v = velocity(&state, grid, t)?;
        check_finite(&v, "velocity", s)?;
        state.latent = euler_step(&state.latent, &v, t, schedule.t_next(s))?;
        check_finite(&state.latent, "latent", s)?;
        trace.push(state.pe_mode);
    }
    Ok((state.latent, trace))
}

/// Everything needed to evaluate the velocity field.
#[derive(Clone, Copy, Debug)]
pub struct Denoiser<'a> {
    pub config: &'a ModelConfig,
    pub params: &'a Params,
    pub codec: &'a LatentCodec,
    pub adapter: Option<&'a LoraAdapter>,
    pub text_ids: &'a [usize],
}

impl Denoiser<'_> {
    pub fn velocity(
        &self,
        conditioning: &TokenStreams,
        latent: &Tensor,
        grid: &PositionGrid,
        t: f32,
    ) -> Result<Tensor> {
        let streams = TokenStreams {
            noise: latent.clone(),
            ..conditioning.clone()
        };
        predict_velocity(
            &streams,
            self.text_ids,
            grid,
            t,
            self.config,
            self.params,
            self.adapter,
        )
    }
}

/// Compact-sequence conditioning for a composed canvas.
#[derive(Clone, Debug)]
pub struct PreparedCanvas {
    pub streams: TokenStreams,
    pub map: IndexMap,
    pub positions: PositionGrid,
}

pub fn prepare(
    model: &Denoiser,
    canvas: &ComposedCanvas,
    layout: &CanvasLayout,
    seed: u64,
) -> Result<PreparedCanvas> {
    let patch = layout.patch;
    contract!(
        patch == model.codec.patch,
        "layout patch {} vs codec patch {}",
        patch,
        model.codec.patch
    );
    contract!(
        canvas.canvas.dims() == layout.canvas_px,
        "canvas {:?} does not match layout {:?}",
        canvas.canvas.dims(),
        layout.canvas_px
    );
    let n = layout.token_count();
    let grid_streams = TokenStreams {
        noise: encode_noise(seed, n, model.config.streams.c_noise)?,
        image: encode_masked_image(
            &canvas.canvas,
            &canvas.edit_mask,
            &canvas.ref_background,
            patch,
        )?,
        mask: encode_mask(&canvas.edit_mask, patch)?,
        text: Tensor::zeros(&[1, model.config.d_model()]),
    };
    let (_, map) = crop_tokens(&grid_streams.noise, layout)?;
    let streams = grid_streams.gather(&map.compact_to_grid)?;
    let positions = restructure_positions(&layout.positions(), &map)?;
    Ok(PreparedCanvas {
        streams,
        map,
        positions,
    })
}

/// Decodes a compact latent onto the canvas and pastes the pixels under
/// `edit_mask` into `canvas`.
pub fn composite(
    codec: &LatentCodec,
    latent: &Tensor,
    map: &IndexMap,
    canvas: &Raster,
    edit_mask: &Mask,
) -> Result<Raster> {
    let (h, w) = canvas.dims();
    let full = map.scatter(latent, &Tensor::zeros(&[map.grid_len, latent.cols()]))?;
    let decoded = codec.decode(&full, h, w)?;
    let mut out = canvas.clone();
    for y in 0..h {
        for x in 0..w {
            if edit_mask.get(y, x) {
                out.set(y, x, decoded.get(y, x));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub canvas: Raster,
    pub latent: Tensor,
    pub trace: Vec<PeMode>,
}

/// Gated sampling of the edit region of `canvas`.
pub fn sample(
    model: &Denoiser,
    canvas: &ComposedCanvas,
    layout: &CanvasLayout,
    region_maps: &[RegionMap],
    schedule: &SamplerSchedule,
) -> Result<SampleOutput> {
    let prep = prepare(model, canvas, layout, schedule.seed)?;
    let transplanted = transplant_all(&prep.positions, region_maps)?;
    let (latent, trace) = integrate(
        prep.streams.noise.clone(),
        schedule,
        &prep.positions,
        &transplanted,
        |state, grid, t| model.velocity(&prep.streams, &state.latent, grid, t),
    )?;
    let out = composite(
        model.codec,
        &latent,
        &prep.map,
        &canvas.canvas,
        &canvas.edit_mask,
    )?;
    Ok(SampleOutput {
        canvas: out,
        latent,
        trace,
    })
}

/// Plain inpainting sampler with native positions throughout.
pub fn sample_native(
    model: &Denoiser,
    canvas: &ComposedCanvas,
    layout: &CanvasLayout,
    n_steps: usize,
    seed: u64,
) -> Result<Raster> {
    let schedule = make_schedule(n_steps, 0, seed)?;
    let prep = prepare(model, canvas, layout, seed)?;
    let mut latent = prep.streams.noise.clone();
    for s in 0..n_steps {
        let t = schedule.timesteps[s];
        let v = model.velocity(&prep.streams, &latent, &prep.positions, t)?;
        latent = euler_step(&latent, &v, t, schedule.t_next(s))?;
        check_finite(&latent, "latent", s)?;
    }
    composite(
        model.codec,
        &latent,
        &prep.map,
        &canvas.canvas,
        &canvas.edit_mask,
    )
}
