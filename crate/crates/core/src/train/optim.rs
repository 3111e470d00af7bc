//! AdamW with decoupled weight decay, and the poly learning-rate schedule.

use crate::error::Error;
use crate::nn::ParamStore;
use crate::tensor::{Gradients, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub max_iter: usize,
    pub power: f64,
    pub warmup_iters: usize,
    pub warmup_ratio: f64,
}

impl LrSchedule {
    pub fn poly(base_lr: f64, max_iter: usize) -> Self {
        LrSchedule { base_lr, max_iter, power: 1.0, warmup_iters: 0, warmup_ratio: 1e-6 }
    }
}

/// `base_lr * (1 - i / max_iter)^power`, scaled during warmup by a factor
/// rising linearly from `warmup_ratio` to 1.
pub fn poly_lr(i: usize, s: &LrSchedule) -> Result<f64, Error> {
    if i > s.max_iter {
        return Err(Error::Invalid(format!("iteration {i} is past the schedule end {}", s.max_iter)));
    }
    if s.max_iter == 0 {
        return Ok(0.0);
    }
    let lr = s.base_lr * (1.0 - i as f64 / s.max_iter as f64).powf(s.power);
    if i < s.warmup_iters {
        let k = 1.0 - (1.0 - i as f64 / s.warmup_iters as f64) * (1.0 - s.warmup_ratio);
        return Ok(lr * k);
    }
    Ok(lr)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Per-parameter moments and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(store: &ParamStore<T>, cfg: AdamWConfig) -> Self {
        let zeros = || store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        OptimState { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// One update of every parameter. `lr_scale[i]`, when given, multiplies
    /// the learning rate of parameter `i`. Parameters without a gradient are
    /// treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64, lr_scale: Option<&[f64]>) -> Result<(), Error> {
        if self.m.len() != store.len() {
            return Err(Error::Invalid(format!("optimizer tracks {} parameters, model has {}", self.m.len(), store.len())));
        }
        // Validate everything before mutating anything.
        for id in store.ids() {
            if let Some(g) = grads.param(id) {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::Invalid(format!("gradient shape mismatch for `{}`", store.params()[id.0].name)));
                }
                if !g.all_finite() {
                    return Err(Error::NonFiniteGradient(store.params()[id.0].name.clone()));
                }
            }
        }
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let lr_i = lr * lr_scale.map_or(1.0, |s| s[id.0]);
            let decay = store.params()[id.0].decay;
            let g = grads.param(id);
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let gj = g.map_or(0.0, |g| g.data()[j].as_f64());
                let mut pj = p[j].as_f64();
                if decay {
                    pj *= 1.0 - lr_i * c.weight_decay;
                }
                let mj = c.beta1 * m[j].as_f64() + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j].as_f64() + (1.0 - c.beta2) * gj * gj;
                m[j] = T::from_f64_lossy(mj);
                v[j] = T::from_f64_lossy(vj);
                pj -= lr_i * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                p[j] = T::from_f64_lossy(pj);
            }
        }
        Ok(())
    }
}
