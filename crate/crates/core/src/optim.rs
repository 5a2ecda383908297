//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::params::ParameterSet;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    /// Number of steps taken.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(cfg: AdamWConfig, params: &ParameterSet<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.values().iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut ParameterSet<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(config_err!(
                "optimizer state covers {} parameters, gradients {}, model {}",
                self.m.len(),
                grads.len(),
                params.len()
            ));
        }
        self.t += 1;
        let c = self.cfg;
        let t = self.t as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let f = |x: f64| T::from_f64_lossy(x);
        let (b1, b2, eps) = (f(c.beta1), f(c.beta2), f(c.eps));
        let (one, lr_t, decay) = (T::one(), f(lr), f(lr * c.weight_decay));
        let (bc1, bc2) = (f(bc1), f(bc2));
        for (i, id) in params.ids().collect::<Vec<_>>().into_iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let g = grads[i].as_ref().map(|g| g.data());
            for j in 0..m.len() {
                let gj = g.map_or(T::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let w = &mut p.data_mut()[j];
                *w = *w - lr_t * (mhat / (vhat.sqrt() + eps)) - decay * *w;
            }
        }
        Ok(())
    }
}
