//! Maximum-likelihood fine-tuning through an unrolled solve, residual
//! fine-tuning with a ControlSynth field, and the dominance penalty.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::{AnyField, Checkpoint, ResidualInfo};
use crate::coupling::{couple, CouplingBatch, CouplingMethod, DEFAULT_MAX_EXACT};
use crate::error::{Error, Result};
use crate::fields::{Conditioned, ControlSynthField, Trainable, VectorField};
use crate::linalg::Mat;
use crate::optim::AdamConfig;
use crate::rng::Rng;
use crate::solvers::{integrate_batch, integrate_with_tape, Method, SolverConfig};
use crate::train::{run_loop, LoopSettings, PairSampler, TrainOutcome};

/// Signed Gershgorin row score
/// `Σ_k (A_kk + Σ_{l≠k} |A_kl|) / (Σ_l |A_kl| + ε)` of a square matrix.
/// Rows whose Gershgorin disc lies in the open left half-plane score below 0.
pub fn dominance_score(a: &Mat, eps: f64) -> f64 {
    assert!(a.is_square(), "dominance score needs a square matrix");
    (0..a.rows())
        .map(|k| {
            let row = a.row(k);
            let abs_sum: f64 = row.iter().map(|v| v.abs()).sum();
            let num = row[k] + abs_sum - row[k].abs();
            num / (abs_sum + eps)
        })
        .sum()
}

/// Gradient of [`dominance_score`]. `sign(0) = 0` is used as the subgradient.
pub fn dominance_score_grad(a: &Mat, eps: f64) -> Mat {
    let n = a.rows();
    let mut g = Mat::zeros(n, n);
    for k in 0..n {
        let row = a.row(k);
        let abs_sum: f64 = row.iter().map(|v| v.abs()).sum();
        let num = row[k] + abs_sum - row[k].abs();
        let den = abs_sum + eps;
        for l in 0..n {
            let s = row[l].signum() * (row[l] != 0.0) as u8 as f64;
            let dnum = if l == k { 1.0 } else { s };
            g[(k, l)] = (dnum * den - num * s) / (den * den);
        }
    }
    g
}

/// `ω` summed over the given matrices.
pub fn dominance_omega(mats: &[&Mat], eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Config(format!("eps_A must be > 0, got {eps}")));
    }
    let mut total = 0.0;
    for (i, a) in mats.iter().enumerate() {
        if !a.is_square() {
            return Err(Error::dim(format!("dominance penalty matrix {i}"), "square", format!("{:?}", a.shape())));
        }
        total += dominance_score(a, eps);
    }
    Ok(total)
}

/// `ω` over the square `A` matrices of a ControlSynth field.
pub fn field_omega(field: &ControlSynthField, eps: f64) -> Result<f64> {
    let mats: Vec<&Mat> = field.square_a_indices().into_iter().map(|i| field.params().get(i)).collect();
    dominance_omega(&mats, eps)
}

/// `λ_ω · ReLU(ω)`.
pub fn dominance_penalty(mats: &[&Mat], eps: f64, lambda_omega: f64) -> Result<f64> {
    if !(lambda_omega >= 0.0) {
        return Err(Error::Config(format!("lambda_omega must be >= 0, got {lambda_omega}")));
    }
    Ok(lambda_omega * dominance_omega(mats, eps)?.max(0.0))
}

/// Covariance of the Gaussian reconstruction model: `σ·I` or `diag(σ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Scalar(f64),
    Diagonal(Vec<f64>),
}

impl Default for Sigma {
    fn default() -> Self {
        Sigma::Scalar(1.0)
    }
}

impl std::str::FromStr for Sigma {
    type Err = Error;

    /// `"1.0"` or a comma-separated diagonal such as `"1,4"`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad sigma entry {p:?}")))
        };
        if s.contains(',') {
            Ok(Sigma::Diagonal(s.split(',').map(parse).collect::<Result<_>>()?))
        } else {
            Ok(Sigma::Scalar(parse(s)?))
        }
    }
}

impl Sigma {
    pub fn validate(&self, dim: usize) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        match self {
            Sigma::Scalar(v) if ok(*v) => Ok(()),
            Sigma::Diagonal(v) if v.len() != dim => Err(Error::dim("sigma diagonal", dim, v.len())),
            Sigma::Diagonal(v) if v.iter().all(|&x| ok(x)) => Ok(()),
            _ => Err(Error::Config(format!("sigma entries must be > 0, got {self:?}"))),
        }
    }

    /// Per-coordinate weights on `ε²`: `1/σ` for the scalar form (the
    /// plain squared error at `σ = 1`) and `1/(2σ_i)` for the diagonal form.
    pub fn weights(&self, dim: usize) -> Vec<f64> {
        match self {
            Sigma::Scalar(v) => vec![1.0 / v; dim],
            Sigma::Diagonal(v) => v.iter().map(|s| 0.5 / s).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MleConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Training solver; must be fixed-step.
    pub solver: Method,
    pub solver_steps: usize,
    pub sigma: Sigma,
    /// Residual window length `T`.
    pub horizon: f64,
    pub lambda_omega: f64,
    pub eps_a: f64,
    pub coupling: CouplingMethod,
    /// Re-pair every batch; otherwise pairs come from one coupled pool
    /// drawn at the start.
    pub repair: bool,
    pub pool_size: usize,
    pub seed: u64,
    pub checkpoint_interval: usize,
}

impl Default for MleConfig {
    fn default() -> Self {
        MleConfig {
            steps: 200,
            batch_size: 128,
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            solver: Method::Euler,
            solver_steps: 16,
            sigma: Sigma::default(),
            horizon: 0.5,
            lambda_omega: 0.05,
            eps_a: 1e-6,
            coupling: CouplingMethod::MinibatchOt,
            repair: true,
            pool_size: DEFAULT_MAX_EXACT,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl MleConfig {
    pub fn solver_config(&self) -> SolverConfig {
        let mut cfg = SolverConfig::euler(self.solver_steps);
        cfg.method = self.solver;
        cfg
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.solver == Method::Dopri5 {
            return Err(Error::Unsupported("fine-tuning needs a fixed-step solver (euler or rk4)".into()));
        }
        self.solver_config().validate()?;
        self.sigma.validate(dim)?;
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        if !(self.horizon >= 0.0) {
            return Err(Error::Config(format!("horizon T must be >= 0, got {}", self.horizon)));
        }
        if !(self.lambda_omega >= 0.0) {
            return Err(Error::Config(format!("lambda_omega must be >= 0, got {}", self.lambda_omega)));
        }
        if !(self.eps_a > 0.0) {
            return Err(Error::Config(format!("eps_A must be > 0, got {}", self.eps_a)));
        }
        if !self.repair && self.pool_size == 0 {
            return Err(Error::Config("pool_size must be >= 1".into()));
        }
        Ok(())
    }

    fn settings(&self, tag: &'static str) -> LoopSettings<'static> {
        LoopSettings {
            adam: self.adam(),
            grad_clip: self.grad_clip,
            steps: self.steps,
            seed: self.seed,
            checkpoint_interval: self.checkpoint_interval,
            tag,
        }
    }
}

/// Record `mean_i Σ_k w_k (x1_ik − x̂_ik)²` on `g`.
pub fn mle_loss_node(g: &mut Graph<'_>, reconstruction: NodeId, x1: &Mat, sigma: &Sigma) -> NodeId {
    let target = g.constant(x1.clone());
    let eps = g.sub(target, reconstruction);
    g.weighted_mean_sq(eps, sigma.weights(x1.cols()))
}

fn check_pairs(field: &dyn VectorField, batch: &CouplingBatch, sigma: &Sigma) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Config("mle_loss needs a nonempty batch".into()));
    }
    if batch.x0.cols() != field.dim() {
        return Err(Error::dim("mle_loss state dim", field.dim(), batch.x0.cols()));
    }
    sigma.validate(field.dim())
}

fn mle_graph<'a>(
    g: &mut Graph<'a>,
    field: &'a dyn VectorField,
    params: &[NodeId],
    batch: &CouplingBatch,
    solver: &SolverConfig,
    sigma: &Sigma,
) -> Result<NodeId> {
    check_pairs(field, batch, sigma)?;
    let x0 = g.constant(batch.x0.clone());
    let solve = integrate_with_tape(g, field, params, x0, 0.0, 1.0, solver)?;
    Ok(mle_loss_node(g, solve.final_state, &batch.x1, sigma))
}

/// Reconstruction loss of the flow over `[0, 1]` through a fixed-step solve.
pub fn mle_loss(field: &dyn VectorField, batch: &CouplingBatch, solver: &SolverConfig, sigma: &Sigma) -> Result<f64> {
    let mut g = Graph::new();
    let p = field.params().bind_frozen(&mut g);
    let loss = mle_graph(&mut g, field, &p, batch, solver, sigma)?;
    Ok(g.scalar(loss))
}

pub fn mle_loss_and_grads(
    field: &dyn VectorField,
    batch: &CouplingBatch,
    solver: &SolverConfig,
    sigma: &Sigma,
) -> Result<(f64, Vec<Option<Mat>>)> {
    let mut g = Graph::new();
    let p = field.params().bind(&mut g);
    let loss = mle_graph(&mut g, field, &p, batch, solver, sigma)?;
    let mut grads = g.backward(loss);
    Ok((g.scalar(loss), field.params().collect_grads(&p, &mut grads)))
}

/// Paired batches for fine-tuning, either re-coupled every draw or taken
/// from one pool coupled up front.
struct PairStream<'s> {
    sampler: &'s mut dyn PairSampler,
    cfg: &'s MleConfig,
    pool: Option<CouplingBatch>,
}

impl PairStream<'_> {
    fn next(&mut self, rng: &mut Rng) -> Result<CouplingBatch> {
        if self.cfg.repair {
            let (x0, x1) = self.sampler.draw(self.cfg.batch_size, rng)?;
            return couple(&x0, &x1, self.cfg.coupling);
        }
        if self.pool.is_none() {
            let (x0, x1) = self.sampler.draw(self.cfg.pool_size, rng)?;
            self.pool = Some(couple(&x0, &x1, self.cfg.coupling)?);
        }
        let pool = self.pool.as_ref().expect("pool initialized above");
        let idx: Vec<usize> = (0..self.cfg.batch_size).map(|_| rng.below(pool.len())).collect();
        Ok(pool.select(&idx))
    }
}

/// Fine-tune every parameter of `field` on the reconstruction loss.
pub fn finetune<F: Trainable>(field: &mut F, sampler: &mut dyn PairSampler, cfg: &MleConfig) -> Result<TrainOutcome> {
    cfg.validate(field.dim())?;
    let solver = cfg.solver_config();
    let mut stream = PairStream {
        sampler,
        cfg,
        pool: None,
    };
    run_loop(
        field,
        cfg.settings("finetuned"),
        |f, rng| {
            let batch = stream.next(rng)?;
            mle_loss_and_grads(f, &batch, &solver, &cfg.sigma)
        },
        |ck| ck,
    )
}

/// Handoff states `φ₁(x0)` of the frozen base field.
pub fn handoff(base: &dyn VectorField, x0: &Mat, solver: &SolverConfig) -> Result<Mat> {
    Ok(integrate_batch(base, x0, 0.0, 1.0, solver)?.final_states)
}

/// Residual objective: reconstruction at `1 + T` plus `λ_ω·ReLU(ω)` over the
/// residual's square `A` matrices.
fn residual_graph<'a>(
    g: &mut Graph<'a>,
    cond: &'a Conditioned<'a>,
    params: &[NodeId],
    start: &Mat,
    x1: &Mat,
    solver: &SolverConfig,
    cfg: &MleConfig,
) -> Result<NodeId> {
    let x = g.constant(start.clone());
    let solve = integrate_with_tape(g, cond, params, x, 1.0, 1.0 + cfg.horizon, solver)?;
    let mut loss = mle_loss_node(g, solve.final_state, x1, &cfg.sigma);
    if cfg.lambda_omega > 0.0 {
        let mut omega: Option<NodeId> = None;
        for idx in cond.field.square_a_indices() {
            let s = g.dominance(params[idx], cfg.eps_a);
            omega = Some(match omega {
                Some(o) => g.add(o, s),
                None => s,
            });
        }
        if let Some(omega) = omega {
            let r = g.relu(omega);
            let pen = g.scale(r, cfg.lambda_omega);
            loss = g.add(loss, pen);
        }
    }
    Ok(loss)
}

/// Residual loss at fixed parameters, for evaluation.
pub fn residual_loss(
    base: &dyn VectorField,
    residual: &ControlSynthField,
    batch: &CouplingBatch,
    cfg: &MleConfig,
) -> Result<f64> {
    let solver = cfg.solver_config();
    check_pairs(base, batch, &cfg.sigma)?;
    let start = handoff(base, &batch.x0, &solver)?;
    let cond = Conditioned::new(residual, start.clone())?;
    let mut g = Graph::new();
    let p = cond.field.params().bind_frozen(&mut g);
    let loss = residual_graph(&mut g, &cond, &p, &start, &batch.x1, &solver, cfg)?;
    Ok(g.scalar(loss))
}

/// Residual loss and the gradient for every residual parameter.
pub fn residual_loss_and_grads(
    base: &dyn VectorField,
    residual: &ControlSynthField,
    batch: &CouplingBatch,
    cfg: &MleConfig,
) -> Result<(f64, Vec<Option<Mat>>)> {
    let solver = cfg.solver_config();
    check_pairs(base, batch, &cfg.sigma)?;
    let start = handoff(base, &batch.x0, &solver)?;
    let cond = Conditioned::new(residual, start.clone())?;
    let mut g = Graph::new();
    let p = cond.field.params().bind(&mut g);
    let loss = residual_graph(&mut g, &cond, &p, &start, &batch.x1, &solver, cfg)?;
    let mut grads = g.backward(loss);
    Ok((g.scalar(loss), cond.field.params().collect_grads(&p, &mut grads)))
}

/// Train a ControlSynth residual on `[1, 1+T]` on top of a frozen base field.
/// Only residual parameters receive gradients.
pub fn finetune_residual(
    base: &AnyField,
    residual: &mut ControlSynthField,
    sampler: &mut dyn PairSampler,
    cfg: &MleConfig,
) -> Result<TrainOutcome> {
    cfg.validate(base.dim())?;
    if !(cfg.horizon > 0.0) {
        return Err(Error::Config(format!("residual fine-tuning needs T > 0, got {}", cfg.horizon)));
    }
    if residual.dim() != base.dim() || residual.config().input_dim != base.dim() {
        return Err(Error::dim("residual field dims", base.dim(), residual.dim()));
    }
    let base_hash = Checkpoint::from_field(base, 0, 0).content_hash();
    let mut stream = PairStream {
        sampler,
        cfg,
        pool: None,
    };
    let info = ResidualInfo {
        base_hash: base_hash.clone(),
        horizon: cfg.horizon,
    };
    let out = run_loop(
        residual,
        cfg.settings("residual"),
        |r, rng| {
            let batch = stream.next(rng)?;
            residual_loss_and_grads(base, r, &batch, cfg)
        },
        |mut ck| {
            ck.residual = Some(info.clone());
            ck
        },
    )?;
    let after = Checkpoint::from_field(base, 0, 0).content_hash();
    if after != base_hash {
        return Err(Error::Config("frozen base field changed during residual fine-tuning".into()));
    }
    Ok(out)
}
