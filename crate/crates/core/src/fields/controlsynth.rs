//! Persidskii-type residual field
//! `ẋ = A₀x + Σ_j A_j f_j(W_j x) + G u + b`.
//!
//! Activations are restricted to a menu whose members are sign-preserving
//! (`s·f(s) > 0` for `s ≠ 0`), continuous and strictly increasing, which is
//! what the stability certificates in [`crate::stability`] rely on.

use serde::{Deserialize, Serialize};

use super::VectorField;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::{sym_eig_min, Mat};
use crate::params::ParamStore;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    LeakyRelu { slope: f64 },
}

impl Activation {
    pub fn validate(self) -> Result<()> {
        match self {
            Activation::Tanh => Ok(()),
            Activation::LeakyRelu { slope } if slope > 0.0 && slope.is_finite() => Ok(()),
            Activation::LeakyRelu { slope } => Err(Error::Config(format!(
                "leaky_relu slope must be > 0 (sign condition), got {slope}"
            ))),
        }
    }

    pub fn apply(self, s: f64) -> f64 {
        match self {
            Activation::Tanh => s.tanh(),
            Activation::LeakyRelu { slope } => {
                if s >= 0.0 {
                    s
                } else {
                    slope * s
                }
            }
        }
    }

    /// `∫₀ˢ f(r) dr` in closed form.
    pub fn integral(self, s: f64) -> f64 {
        match self {
            // log cosh, written to avoid overflow
            Activation::Tanh => {
                let a = s.abs();
                a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
            }
            Activation::LeakyRelu { slope } => {
                if s >= 0.0 {
                    0.5 * s * s
                } else {
                    0.5 * slope * s * s
                }
            }
        }
    }

    /// Global Lipschitz constant.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Tanh => 1.0,
            Activation::LeakyRelu { slope } => slope.max(1.0),
        }
    }

    /// Whether `f(s) → ±∞` as `s → ±∞`.
    pub fn is_unbounded(self) -> bool {
        matches!(self, Activation::LeakyRelu { .. })
    }

    /// Whether `∫₀ˢ f → +∞` as `|s| → ∞`; true for every menu entry.
    pub fn has_unbounded_integral(self) -> bool {
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSynthConfig {
    pub dim: usize,
    /// `(k_j, f_j)` per nonlinear block.
    pub blocks: Vec<(usize, Activation)>,
    /// Dimension of the conditioning input `u`.
    pub input_dim: usize,
}

impl ControlSynthConfig {
    /// One tanh block of width 16, conditioning on a state-sized input.
    pub fn default_for(dim: usize) -> Self {
        ControlSynthConfig {
            dim,
            blocks: vec![(16, Activation::Tanh)],
            input_dim: dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config("field dim must be >= 1".into()));
        }
        for (k, act) in &self.blocks {
            if *k == 0 {
                return Err(Error::Config("block width must be >= 1".into()));
            }
            act.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlSynthField {
    config: ControlSynthConfig,
    params: ParamStore,
}

// parameter layout: a0, then (a{j}, w{j}) per block, then g.weight, g.bias
const A0: usize = 0;

impl ControlSynthField {
    /// All-zero matrices: the field is identically zero.
    pub fn zeros(config: ControlSynthConfig) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut params = ParamStore::new();
        params.push("a0", Mat::zeros(d, d), true);
        for (j, (k, _)) in config.blocks.iter().enumerate() {
            params.push(format!("a{}", j + 1), Mat::zeros(d, *k), true);
            params.push(format!("w{}", j + 1), Mat::zeros(*k, d), true);
        }
        params.push("g.weight", Mat::zeros(d, config.input_dim), true);
        params.push("g.bias", Mat::zeros(1, d), true);
        Ok(ControlSynthField { config, params })
    }

    /// Near-identity residual initialisation: `A₀ = -decay·I`, small
    /// random `A_j`, Gaussian `W_j` (full rank), and `G = -A₀` so that when
    /// `u` is the starting state the flow initially barely moves.
    pub fn new(config: ControlSynthConfig, decay: f64, rng: &mut Rng) -> Result<Self> {
        let mut f = Self::zeros(config)?;
        let d = f.config.dim;
        let a0 = Mat::identity(d).scale(-decay);
        f.params.set(A0, a0.clone())?;
        for j in 0..f.config.blocks.len() {
            let k = f.config.blocks[j].0;
            let a = Mat::from_vec(d, k, (0..d * k).map(|_| 0.01 * rng.normal()).collect())?;
            let w = Mat::from_vec(k, d, (0..d * k).map(|_| rng.normal() / (d as f64).sqrt()).collect())?;
            f.params.set(1 + 2 * j, a)?;
            f.params.set(2 + 2 * j, w)?;
        }
        if f.config.input_dim == d {
            let gi = f.g_weight_index();
            f.params.set(gi, a0.scale(-1.0))?;
        }
        if !f.weights_full_rank() {
            return Err(Error::Config("random W_j came out rank deficient; reseed".into()));
        }
        Ok(f)
    }

    pub fn from_params(config: ControlSynthConfig, params: ParamStore) -> Result<Self> {
        let reference = ControlSynthField::zeros(config.clone())?;
        super::mlp::check_layout(&reference.params, &params)?;
        Ok(ControlSynthField { config, params })
    }

    pub fn config(&self) -> &ControlSynthConfig {
        &self.config
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_blocks(&self) -> usize {
        self.config.blocks.len()
    }

    pub fn a0(&self) -> &Mat {
        self.params.get(A0)
    }

    pub fn a(&self, j: usize) -> &Mat {
        self.params.get(1 + 2 * j)
    }

    pub fn w(&self, j: usize) -> &Mat {
        self.params.get(2 + 2 * j)
    }

    pub fn activation(&self, j: usize) -> Activation {
        self.config.blocks[j].1
    }

    pub fn block_width(&self, j: usize) -> usize {
        self.config.blocks[j].0
    }

    fn g_weight_index(&self) -> usize {
        1 + 2 * self.config.blocks.len()
    }

    pub fn g_weight(&self) -> &Mat {
        self.params.get(self.g_weight_index())
    }

    pub fn g_bias(&self) -> &Mat {
        self.params.get(self.g_weight_index() + 1)
    }

    /// Set a named matrix (`a0`, `a1`, `w1`, `g.weight`, `g.bias`, ...).
    pub fn set(&mut self, name: &str, value: Mat) -> Result<()> {
        let idx = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::Config(format!("no parameter named {name}")))?;
        self.params.set(idx, value)
    }

    /// Square `A` matrices (always `A₀`; `A_j` when `k_j = d`).
    pub fn square_a_indices(&self) -> Vec<usize> {
        let mut idx = vec![A0];
        for j in 0..self.num_blocks() {
            if self.block_width(j) == self.config.dim {
                idx.push(1 + 2 * j);
            }
        }
        idx
    }

    /// Rank of every `W_j` equals `min(k_j, d)`.
    pub fn weights_full_rank(&self) -> bool {
        (0..self.num_blocks()).all(|j| {
            let w = self.w(j);
            let gram = if w.rows() <= w.cols() {
                w.matmul_nt(w)
            } else {
                w.matmul_tn(w)
            };
            sym_eig_min(&gram.symmetrize()).is_ok_and(|m| m > 1e-10)
        })
    }

    /// `f_j(W_j x)` for a single state.
    pub fn block_activation(&self, j: usize, x: &[f64]) -> Vec<f64> {
        let act = self.activation(j);
        self.w(j).mat_vec(x).into_iter().map(|s| act.apply(s)).collect()
    }

    /// Record the field with conditioning input `u` (rows matching `x`, or
    /// `None` for `u = 0`).
    pub fn forward_with_input<'a>(
        &'a self,
        g: &mut Graph<'a>,
        params: &[NodeId],
        x: NodeId,
        u: Option<NodeId>,
    ) -> NodeId {
        let mut out = g.matmul_nt(x, params[A0]);
        for j in 0..self.num_blocks() {
            let z = g.matmul_nt(x, params[2 + 2 * j]);
            let f = match self.activation(j) {
                Activation::Tanh => g.tanh(z),
                Activation::LeakyRelu { slope } => g.leaky_relu(z, slope),
            };
            let contrib = g.matmul_nt(f, params[1 + 2 * j]);
            out = g.add(out, contrib);
        }
        let gi = self.g_weight_index();
        if let Some(u) = u {
            let gu = g.matmul_nt(u, params[gi]);
            out = g.add(out, gu);
        }
        g.add_row(out, params[gi + 1])
    }
}

impl VectorField for ControlSynthField {
    fn dim(&self) -> usize {
        self.config.dim
    }

    fn kind(&self) -> &'static str {
        "controlsynth"
    }

    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, params: &[NodeId], _t: &[f64], x: NodeId) -> NodeId {
        self.forward_with_input(g, params, x, None)
    }
}

/// A [`ControlSynthField`] with its conditioning input held fixed.
/// `input` has one row per state row, or a single row shared by all.
pub struct Conditioned<'f> {
    pub field: &'f ControlSynthField,
    pub input: Mat,
}

impl<'f> Conditioned<'f> {
    pub fn new(field: &'f ControlSynthField, input: Mat) -> Result<Self> {
        if input.cols() != field.config.input_dim {
            return Err(Error::dim("conditioning input", field.config.input_dim, input.cols()));
        }
        Ok(Conditioned { field, input })
    }

    fn input_rows(&self, rows: usize) -> Mat {
        if self.input.rows() == rows {
            return self.input.clone();
        }
        assert_eq!(self.input.rows(), 1, "conditioning input rows must match the batch or be 1");
        let mut m = Mat::zeros(rows, self.input.cols());
        for i in 0..rows {
            m.row_mut(i).copy_from_slice(self.input.row(0));
        }
        m
    }
}

impl VectorField for Conditioned<'_> {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn kind(&self) -> &'static str {
        "controlsynth"
    }

    fn params(&self) -> &ParamStore {
        &self.field.params
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, params: &[NodeId], _t: &[f64], x: NodeId) -> NodeId {
        let rows = g.value(x).rows();
        let u = if self.input.rows() == rows {
            g.constant_ref(&self.input)
        } else {
            g.constant(self.input_rows(rows))
        };
        self.field.forward_with_input(g, params, x, Some(u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn menu() -> Vec<Activation> {
        vec![
            Activation::Tanh,
            Activation::LeakyRelu { slope: 0.1 },
            Activation::LeakyRelu { slope: 2.0 },
        ]
    }

    fn grid() -> Vec<f64> {
        let mut g: Vec<f64> = (0..=40).map(|i| 10f64.powf(-3.0 + i as f64 * 0.1)).collect();
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        g.extend(neg);
        g.sort_by(f64::total_cmp);
        g
    }

    #[test]
    fn menu_satisfies_sign_condition() {
        for act in menu() {
            for s in grid() {
                assert!(s * act.apply(s) > 0.0, "{act:?} at {s}");
            }
        }
    }

    #[test]
    fn menu_is_strictly_increasing() {
        let g = grid();
        for act in menu() {
            for w in g.windows(2) {
                assert!(act.apply(w[1]) > act.apply(w[0]), "{act:?} at {:?}", w);
            }
        }
    }

    #[test]
    fn non_positive_slope_rejected() {
        let cfg = ControlSynthConfig {
            dim: 2,
            blocks: vec![(4, Activation::LeakyRelu { slope: 0.0 })],
            input_dim: 2,
        };
        assert!(ControlSynthField::zeros(cfg).is_err());
    }

    #[test]
    fn linear_case() {
        let cfg = ControlSynthConfig {
            dim: 2,
            blocks: vec![],
            input_dim: 2,
        };
        let mut f = ControlSynthField::zeros(cfg).unwrap();
        f.set("a0", Mat::identity(2).scale(-1.0)).unwrap();
        assert_eq!(f.eval(0.0, &[2.0, 0.0]).unwrap(), vec![-2.0, 0.0]);
    }

    #[test]
    fn integrals_match_quadrature() {
        for act in menu() {
            for s in [-2.5, -0.3, 0.0, 0.7, 3.0] {
                let n = 20_000;
                let h = s / n as f64;
                let quad: f64 = (0..n).map(|i| act.apply((i as f64 + 0.5) * h) * h).sum();
                assert!((act.integral(s) - quad).abs() < 1e-7, "{act:?} {s}");
            }
        }
        assert!((Activation::Tanh.integral(1.0) - 1f64.cosh().ln()).abs() < 1e-15);
    }

    #[test]
    fn init_has_full_rank_weights() {
        let f = ControlSynthField::new(ControlSynthConfig::default_for(2), 1.0, &mut Rng::new(0)).unwrap();
        assert!(f.weights_full_rank());
        assert_eq!(f.w(0).shape(), (16, 2));
    }

    #[test]
    fn conditioned_input_enters_affinely() {
        let cfg = ControlSynthConfig {
            dim: 2,
            blocks: vec![],
            input_dim: 2,
        };
        let mut f = ControlSynthField::zeros(cfg).unwrap();
        f.set("g.weight", Mat::identity(2).scale(3.0)).unwrap();
        f.set("g.bias", Mat::row_vector(&[1.0, -1.0])).unwrap();
        let c = Conditioned::new(&f, Mat::row_vector(&[1.0, 2.0])).unwrap();
        assert_eq!(c.eval(0.0, &[5.0, 5.0]).unwrap(), vec![4.0, 5.0]);
    }
}
