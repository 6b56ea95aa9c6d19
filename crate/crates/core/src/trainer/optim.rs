//! AdamW with decoupled weight decay, and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub warmup_epochs: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimSpec {
    fn default() -> Self {
        OptimSpec {
            base_lr: 1e-3,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            eps: 1e-8,
            warmup_epochs: 5.0,
            total_epochs: 25,
            batch_size: 64,
        }
    }
}

impl OptimSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return fail(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        if self.total_epochs == 0 {
            return fail("total_epochs must be positive".into());
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.total_epochs as f64) {
            return fail(format!(
                "warmup_epochs must lie in [0, total_epochs = {}), got {}",
                self.total_epochs, self.warmup_epochs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// Learning rate at a fractional epoch: linear from 0 over the warmup, then
/// half a cosine period down to 0 at `total_epochs`.
pub fn lr_at(epoch: f64, spec: &OptimSpec) -> f64 {
    let warm = spec.warmup_epochs;
    let total = spec.total_epochs as f64;
    if epoch < warm {
        return spec.base_lr * epoch / warm;
    }
    let progress = ((epoch - warm) / (total - warm)).clamp(0.0, 1.0);
    spec.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moment buffers, one pair per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.len()]).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update. Parameters whose gradient is `None` are left untouched
/// (moments included). Decay applies only to parameters flagged `decay`.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &[Option<Vec<f64>>],
    state: &mut AdamState,
    lr: f64,
    spec: &OptimSpec,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "adamw_step: {} params, {} grads, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if let Some(g) = g {
            if g.len() != p.value.len() {
                return Err(Error::shape("adamw_step", &[g.len()], &[p.value.len()]));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient {} at element {i} of parameter {}",
                    g[i], p.name
                )));
            }
        }
    }
    state.step += 1;
    let (b1, b2) = spec.betas;
    let bc1 = 1.0 - b1.powi(state.step as i32);
    let bc2 = 1.0 - b2.powi(state.step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let Some(g) = g else { continue };
        let shrink = if p.decay { 1.0 - lr * spec.weight_decay } else { 1.0 };
        for (((w, &gi), mi), vi) in p.value.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *w *= shrink;
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= lr * mhat / (vhat.sqrt() + spec.eps);
        }
        if let Some(i) = p.value.data().iter().position(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value at element {i} of parameter {} after the update",
                p.name
            )));
        }
    }
    Ok(())
}

/// Scales every present gradient so the global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Vec<f64>>], max_norm: f64) -> f64 {
    let sq: f64 = grads.iter().flatten().flat_map(|g| g.iter()).map(|x| x * x).sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
