//! Time-dependent vector fields `v_t(x; θ)`.
//!
//! Every field records its forward pass on an [`autodiff::Graph`], which
//! gives one code path for inference and for training: plain evaluation
//! binds the parameters as constants, training binds them as leaves.

mod analytic;
mod controlsynth;
mod mlp;

pub use analytic::{AnalyticField, AnalyticKind};
pub use controlsynth::{Activation, Conditioned, ControlSynthConfig, ControlSynthField};
pub use mlp::{time_features, MlpConfig, MlpField};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::{norm2, Mat};
use crate::params::ParamStore;
use crate::rng::Rng;

pub trait VectorField {
    /// State dimension.
    fn dim(&self) -> usize;

    fn kind(&self) -> &'static str;

    fn params(&self) -> &ParamStore;

    /// Record `v(t_i, x_i)` for every row `x_i` of node `x`. `t` holds one
    /// time per row. `params` are this field's parameters bound on `g`.
    fn forward<'a>(&'a self, g: &mut Graph<'a>, params: &[NodeId], t: &[f64], x: NodeId) -> NodeId;

    /// Evaluate rows of `x` at per-row times, parameters held constant.
    fn eval_batch(&self, t: &[f64], x: &Mat) -> Result<Mat> {
        if x.cols() != self.dim() {
            return Err(Error::dim(format!("{} field input", self.kind()), self.dim(), x.cols()));
        }
        if t.len() != x.rows() {
            return Err(Error::dim(format!("{} field times", self.kind()), x.rows(), t.len()));
        }
        let mut g = Graph::new();
        let p = self.params().bind_frozen(&mut g);
        let xn = g.constant_ref(x);
        let out = self.forward(&mut g, &p, t, xn);
        let v = g.value(out);
        if !v.is_finite() {
            let bad = (0..v.rows()).find(|&i| v.row(i).iter().any(|z| !z.is_finite())).unwrap_or(0);
            return Err(Error::NonFinite(format!(
                "{} field output at t = {}, x = {:?}",
                self.kind(),
                t[bad],
                x.row(bad)
            )));
        }
        Ok(v.clone())
    }

    fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.eval_batch(&[t], &Mat::row_vector(x))?.into_vec())
    }
}

/// A field whose parameters can be updated and saved.
pub trait Trainable: VectorField + Clone {
    fn params_mut(&mut self) -> &mut ParamStore;

    fn checkpoint(&self, rng_seed: u64, step: usize) -> crate::checkpoint::Checkpoint;
}

/// Axis-aligned probing box `[lo_i, hi_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxDomain {
    pub fn cube(dim: usize, half_width: f64) -> Self {
        BoxDomain {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lo.len() != self.hi.len() || self.lo.is_empty() {
            return Err(Error::Config("box bounds must be nonempty and of equal length".into()));
        }
        if self.lo.iter().zip(&self.hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Config(format!("degenerate box {:?} .. {:?}", self.lo, self.hi)));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(&l, &h)| rng.uniform_in(l, h)).collect()
    }
}

/// Empirical Lipschitz constant in `x`: the largest
/// `‖v(t,x) - v(t,y)‖ / ‖x - y‖` over `probes` random pairs in `domain` with
/// `t ~ U[0, 1]`. Always a lower bound on the true constant.
pub fn lipschitz_estimate(
    field: &dyn VectorField,
    domain: &BoxDomain,
    probes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    domain.validate()?;
    if probes < 2 {
        return Err(Error::Config(format!("lipschitz_estimate needs >= 2 probes, got {probes}")));
    }
    if domain.lo.len() != field.dim() {
        return Err(Error::dim("lipschitz_estimate box", field.dim(), domain.lo.len()));
    }
    let d = field.dim();
    let mut xs = Mat::zeros(2 * probes, d);
    let mut ts = Vec::with_capacity(2 * probes);
    for k in 0..probes {
        let t = rng.uniform();
        xs.row_mut(2 * k).copy_from_slice(&domain.sample(rng));
        xs.row_mut(2 * k + 1).copy_from_slice(&domain.sample(rng));
        ts.push(t);
        ts.push(t);
    }
    let v = field.eval_batch(&ts, &xs)?;
    let mut best: f64 = 0.0;
    for k in 0..probes {
        let dx: Vec<f64> = xs.row(2 * k).iter().zip(xs.row(2 * k + 1)).map(|(a, b)| a - b).collect();
        let dv: Vec<f64> = v.row(2 * k).iter().zip(v.row(2 * k + 1)).map(|(a, b)| a - b).collect();
        let denom = norm2(&dx);
        if denom > 0.0 {
            best = best.max(norm2(&dv) / denom);
        }
    }
    Ok(best)
}
