use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::VectorField;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::params::ParamStore;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub dim: usize,
    pub hidden: Vec<usize>,
    /// Number of sinusoidal time features; must be even.
    pub time_features: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            dim: 2,
            hidden: vec![64, 64],
            time_features: 8,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("field dim must be >= 1".into()));
        }
        if self.time_features % 2 != 0 {
            return Err(Error::Config(format!(
                "time_features must be even, got {}",
                self.time_features
            )));
        }
        if self.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        Ok(())
    }

    /// Layer widths including input and output.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.dim + self.time_features];
        w.extend(&self.hidden);
        w.push(self.dim);
        w
    }
}

/// `[sin(π k t), cos(π k t)]` for `k = 1..=count/2`, one row per time.
pub fn time_features(t: &[f64], count: usize) -> Mat {
    let mut m = Mat::zeros(t.len(), count);
    for (i, &ti) in t.iter().enumerate() {
        for k in 0..count / 2 {
            let a = PI * (k + 1) as f64 * ti;
            m[(i, 2 * k)] = a.sin();
            m[(i, 2 * k + 1)] = a.cos();
        }
    }
    m
}

/// Tanh MLP on `[x, time_features(t)]` with a linear output layer.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpField {
    config: MlpConfig,
    params: ParamStore,
}

impl MlpField {
    /// Xavier-uniform weights, zero biases.
    pub fn new(config: MlpConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let widths = config.widths();
        let mut params = ParamStore::new();
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out).map(|_| rng.uniform_in(-bound, bound)).collect();
            params.push(format!("l{l}.weight"), Mat::from_vec(fan_out, fan_in, data)?, true);
            params.push(format!("l{l}.bias"), Mat::zeros(1, fan_out), true);
        }
        Ok(MlpField { config, params })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (l, pair) in config.widths().windows(2).enumerate() {
            params.push(format!("l{l}.weight"), Mat::zeros(pair[1], pair[0]), true);
            params.push(format!("l{l}.bias"), Mat::zeros(1, pair[1]), true);
        }
        Ok(MlpField { config, params })
    }

    pub fn from_params(config: MlpConfig, params: ParamStore) -> Result<Self> {
        let reference = MlpField::zeros(config.clone())?;
        check_layout(&reference.params, &params)?;
        Ok(MlpField { config, params })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.set_trainable(trainable);
    }
}

pub(crate) fn check_layout(reference: &ParamStore, got: &ParamStore) -> Result<()> {
    if reference.len() != got.len() {
        return Err(Error::dim("parameter count", reference.len(), got.len()));
    }
    for (a, b) in reference.iter().zip(got.iter()) {
        if a.name != b.name || a.value.shape() != b.value.shape() {
            return Err(Error::dim(
                "parameter layout",
                format!("{} {:?}", a.name, a.value.shape()),
                format!("{} {:?}", b.name, b.value.shape()),
            ));
        }
    }
    Ok(())
}

impl VectorField for MlpField {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn kind(&self) -> &'static str {
        "mlp"
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, params: &[NodeId], t: &[f64], x: NodeId) -> NodeId {
        let layers = params.len() / 2;
        let mut h = if self.config.time_features > 0 {
            let emb = g.constant(time_features(t, self.config.time_features));
            g.concat_cols(x, emb)
        } else {
            x
        };
        for l in 0..layers {
            let z = g.matmul_nt(h, params[2 * l]);
            h = g.add_row(z, params[2 * l + 1]);
            if l + 1 < layers {
                h = g.tanh(h);
            }
        }
        h
    }
}
