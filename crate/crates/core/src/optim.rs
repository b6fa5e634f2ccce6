//! Adam and global-norm gradient clipping over a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("Adam eps must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Option<Mat>>,
    v: Vec<Option<Mat>>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let zeros = |p: &crate::params::Param| p.grad.as_ref().map(|g| Mat::zeros(g.rows(), g.cols()));
        Ok(Adam {
            cfg,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            t: 0,
        })
    }

    /// Apply one update from the stored gradients. Frozen parameters are
    /// never touched.
    pub fn step(&mut self, params: &mut ParamStore) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for ((p, m), v) in params.params_mut().zip(&mut self.m).zip(&mut self.v) {
            let (Some(g), Some(m), Some(v)) = (p.grad.as_ref(), m.as_mut(), v.as_mut()) else {
                continue;
            };
            if lr == 0.0 {
                continue;
            }
            let value = p.value.data_mut();
            for k in 0..value.len() {
                let gk = g.data()[k];
                let mk = &mut m.data_mut()[k];
                *mk = beta1 * *mk + (1.0 - beta1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                value[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Rescale stored gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for p in params.params_mut() {
            if let Some(g) = p.grad.as_mut() {
                for x in g.data_mut() {
                    *x *= s;
                }
            }
        }
    }
    norm
}
