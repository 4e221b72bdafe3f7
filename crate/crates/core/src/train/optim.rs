//! AdamW with linear warmup and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::numerics::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_iters: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 1e-2,
            warmup_iters: 200,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    /// `min(1, step / warmup_iters)`; no warmup when `warmup_iters` is 0.
    pub fn warmup_factor(&self, step: u64) -> f64 {
        if self.warmup_iters == 0 {
            1.0
        } else {
            (step as f64 / self.warmup_iters as f64).min(1.0)
        }
    }

    pub fn effective_lr(&self, step: u64) -> f64 {
        self.learning_rate * self.warmup_factor(step)
    }
}

/// First and second moments, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix<f32>>,
    pub v: Vec<Matrix<f32>>,
    /// Completed optimizer steps.
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &[Matrix<T>]) -> Self {
        let zeros: Vec<Matrix<f32>> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<T: Scalar>(grads: &[Matrix<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping. A non-positive `max_norm` disables it.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Matrix<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x = *x * s);
        }
    }
    norm
}

/// One AdamW update; returns the learning rate applied.
///
/// `decay[i]` selects whether parameter `i` receives weight decay.
pub fn adamw_step<T: Scalar>(
    params: &mut [Matrix<T>],
    grads: &[Matrix<T>],
    state: &mut AdamState,
    hp: &AdamW,
    decay: &[bool],
) -> Result<f64> {
    ensure!(
        params.len() == grads.len() && params.len() == state.m.len() && params.len() == decay.len(),
        "optimizer got {} params, {} grads, {} moments, {} decay flags",
        params.len(),
        grads.len(),
        state.m.len(),
        decay.len()
    );
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        ensure!(
            p.shape() == g.shape() && p.shape() == state.m[i].shape(),
            "shape mismatch at parameter {i}: {:?} vs {:?}",
            p.shape(),
            g.shape()
        );
    }
    state.step += 1;
    let step = state.step;
    let lr = hp.effective_lr(step);
    let bc1 = 1.0 - hp.beta1.powf(step as f64);
    let bc2 = 1.0 - hp.beta2.powf(step as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let shrink = if decay[i] { 1.0 - lr * hp.weight_decay } else { 1.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj.as_f64();
            let mj = hp.beta1 * m[j] as f64 + (1.0 - hp.beta1) * gj;
            let vj = hp.beta2 * v[j] as f64 + (1.0 - hp.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let update = (mj / bc1) / ((vj / bc2).sqrt() + hp.eps);
            *x = T::of(x.as_f64() * shrink - lr * update);
        }
    }
    Ok(lr)
}
