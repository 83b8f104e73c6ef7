use std::collections::BTreeMap;

use super::{Params, Tensor};
use crate::error::{shape_check, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter name.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u32,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient; `lr_scale`
    /// multiplies the configured learning rate (for schedules).
    pub fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Tensor>,
        lr_scale: f32,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let lr = c.lr * lr_scale;
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            shape_check!(
                p.shape() == g.shape(),
                "gradient for `{}` has shape {:?}",
                name,
                g.shape()
            );
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Rescales gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor>, max_norm: f32) -> f32 {
    let total: f32 = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f32>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let s = max_norm / total;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    total
}
