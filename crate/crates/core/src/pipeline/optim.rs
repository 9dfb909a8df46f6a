use std::collections::BTreeMap;

use log::warn;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Parameter-name prefix of the backbone learning-rate group.
pub const BACKBONE_PREFIX: &str = "backbone.";

/// Linear warmup from 0 to `base_lr`, then polynomial decay to 0 at `total_steps`.
pub fn poly_lr(step: usize, base_lr: f64, warmup_steps: usize, total_steps: usize, power: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return 0.0;
    }
    let t = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    base_lr * (1.0 - t).powf(power)
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied updates so far.
    pub step: u64,
    /// Updates skipped because of non-finite gradients.
    pub skipped: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, skipped: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

impl AdamW {
    /// Updates every parameter from its accumulated gradient. Parameters whose
    /// name starts with [`BACKBONE_PREFIX`] use `lr * backbone_lr_mult`.
    ///
    /// Returns `false` (and leaves parameters untouched) when any gradient is
    /// non-finite.
    pub fn update(
        &mut self,
        params: &mut ParamStore<f32>,
        lr: f64,
        weight_decay: f64,
        backbone_lr_mult: f64,
    ) -> Result<bool> {
        let finite = params.iter().all(|(_, t)| t.grad().is_none_or(|g| g.iter().all(|v| v.is_finite())));
        if !finite {
            self.skipped += 1;
            warn!("adamw: non-finite gradient, skipping update ({} skipped so far)", self.skipped);
            return Ok(false);
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        for (name, tensor) in params.iter_mut() {
            let n = tensor.numel();
            let grad: Vec<f32> = tensor.grad().map_or_else(|| vec![0.0; n], <[f32]>::to_vec);
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
            if m.len() != n || v.len() != n {
                return Err(Error::shape("adamw", format!("state for `{name}` has the wrong size")));
            }
            let group_lr = if name.starts_with(BACKBONE_PREFIX) { lr * backbone_lr_mult } else { lr };
            for (i, p) in tensor.data_mut().iter_mut().enumerate() {
                let g = f64::from(grad[i]);
                let mi = b1 * f64::from(m[i]) + (1.0 - b1) * g;
                let vi = b2 * f64::from(v[i]) + (1.0 - b2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let mhat = mi / c1;
                let vhat = vi / c2;
                let pv = f64::from(*p);
                *p = (pv - group_lr * (mhat / (vhat.sqrt() + self.eps) + weight_decay * pv)) as f32;
            }
        }
        Ok(true)
    }
}
