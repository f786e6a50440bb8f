//! AdamW with decoupled, multiplicative weight decay.

use crate::elem::Elem;
use crate::error::{invalid, Result, TensorError};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: one first/second moment buffer per stored parameter.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

/// One AdamW update of a single buffer. `step` is the 1-based step index.
pub fn adamw_update<T: Elem>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], step: u64, cfg: &AdamWConfig) {
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let step_size = T::from_f64_lossy(cfg.lr / bc1);
    let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
    let decay = T::from_f64_lossy(1.0 - cfg.lr * cfg.weight_decay);
    let eps = T::from_f64_lossy(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let denom = (v[i] * inv_bc2).sqrt() + eps;
        param[i] = param[i] * decay - step_size * m[i] / denom;
    }
}

impl<T: Elem> AdamW<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let m = store.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        let v = store.iter().map(|p| vec![T::zero(); p.data.len()]).collect();
        AdamW { config, step: 0, m, v }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every trainable parameter. Parameters without a
    /// gradient still decay. Any non-finite gradient aborts the whole step
    /// before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return invalid("AdamW::step", "gradient list does not match the parameter store");
        }
        for (p, g) in store.iter().zip(grads) {
            if let Some(g) = g {
                if g.len() != p.data.len() {
                    return invalid("AdamW::step", format!("gradient for `{}` has wrong length", p.name));
                }
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(TensorError::NonFiniteGradient { param: p.name.clone() });
                }
            }
        }
        self.step += 1;
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            match &grads[i] {
                Some(g) => adamw_update(&mut p.data, g, &mut self.m[i], &mut self.v[i], self.step, &self.config),
                None => {
                    let z = vec![T::zero(); p.data.len()];
                    adamw_update(&mut p.data, &z, &mut self.m[i], &mut self.v[i], self.step, &self.config);
                }
            }
        }
        Ok(())
    }
}
