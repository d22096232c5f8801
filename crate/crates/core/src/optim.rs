//! AdamW with decoupled weight decay and the warmup+cosine schedule shared
//! by every training mode.

use crate::error::{CoreError, Result};
use crate::model::Params;
use crate::tape::Float;
use ndarray::Array2;

/// Fraction of total steps spent in linear warmup.
pub const WARMUP_FRAC: f64 = 0.03;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.01;

/// Learning rate at `step` of `total`: linear 0→peak over the first 3% of
/// steps, then cosine peak→0.
pub fn lr_at(step: u64, total: u64, peak: f64) -> f64 {
    assert!(total > 0);
    let warm = ((WARMUP_FRAC * total as f64).ceil() as u64).max(1);
    if step < warm {
        return peak * step as f64 / warm as f64;
    }
    if step >= total {
        return 0.0;
    }
    let t = (step - warm) as f64 / (total - warm) as f64;
    peak * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// First-and-second-moment state. Moments live in the training precision.
pub struct AdamW<F: Float> {
    pub m: Vec<Array2<F>>,
    pub v: Vec<Array2<F>>,
    pub step: u64,
}

impl<F: Float> AdamW<F> {
    pub fn new(params: &Params<F>) -> Self {
        AdamW {
            m: params.arrays.iter().map(|a| Array2::zeros(a.dim())).collect(),
            v: params.arrays.iter().map(|a| Array2::zeros(a.dim())).collect(),
            step: 0,
        }
    }

    /// One decoupled-weight-decay update at learning rate `lr`. Gradients
    /// must be finite; a non-finite gradient aborts before touching any
    /// parameter.
    pub fn step(&mut self, params: &mut Params<F>, grads: &[Array2<F>], lr: f64) -> Result<()> {
        assert_eq!(grads.len(), params.arrays.len());
        for g in grads {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(CoreError::NonFinite("gradient"));
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        let b1 = F::from_f64(BETA1);
        let b2 = F::from_f64(BETA2);
        let one_m_b1 = F::from_f64(1.0 - BETA1);
        let one_m_b2 = F::from_f64(1.0 - BETA2);

        for i in 0..params.arrays.len() {
            let decay = if params.decay[i] { lr * WEIGHT_DECAY } else { 0.0 };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = &mut params.arrays[i];
            let g = &grads[i];
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = *m * b1 + g * one_m_b1;
                *v = *v * b2 + g * g * one_m_b2;
                let mhat = m.to_f64() / bc1;
                let vhat = v.to_f64() / bc2;
                let upd = lr * mhat / (vhat.sqrt() + ADAM_EPS) + decay * p.to_f64();
                *p = F::from_f64(p.to_f64() - upd);
            });
        }
        Ok(())
    }
}

/// Global L2 norm across all gradient arrays.
pub fn grad_norm<F: Float>(grads: &[Array2<F>]) -> f64 {
    grads
        .iter()
        .map(|g| g.iter().map(|&x| x.to_f64() * x.to_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scale gradients so their global norm is at most `max_norm`; returns the
/// pre-clip norm.
pub fn clip_grads<F: Float>(grads: &mut [Array2<F>], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    norm
}
