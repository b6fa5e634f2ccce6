//! Evaluation: exact small-sample W2, reconstruction error, NFE and path
//! straightness, over a base field optionally followed by a residual stage.

use serde::{Deserialize, Serialize};

use crate::assignment::solve_assignment;
use crate::checkpoint::{AnyField, Checkpoint};
use crate::coupling::{couple, sq_dist_matrix, CouplingBatch, CouplingMethod, DEFAULT_MAX_EXACT};
use crate::error::{Error, Result};
use crate::fields::{Conditioned, ControlSynthField, VectorField};
use crate::linalg::{norm2, Mat};
use crate::rng::Rng;
use crate::solvers::{integrate, integrate_batch, BatchSolve, SolverConfig, Trajectory};
use crate::train::PairSampler;

/// `sqrt(min_π mean_i ‖a_i − b_π(i)‖²)` by exact assignment.
pub fn wasserstein2(a: &Mat, b: &Mat) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::dim("wasserstein2 sample counts", a.rows(), b.rows()));
    }
    if a.cols() != b.cols() {
        return Err(Error::dim("wasserstein2 dims", a.cols(), b.cols()));
    }
    if a.rows() == 0 || a.rows() > DEFAULT_MAX_EXACT {
        return Err(Error::Config(format!(
            "wasserstein2 needs 1..={DEFAULT_MAX_EXACT} samples, got {}",
            a.rows()
        )));
    }
    let cost = sq_dist_matrix(a, b);
    let perm = solve_assignment(&cost)?;
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    Ok((total / a.rows() as f64).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Straightness {
    pub value: f64,
    /// Start and end coincide; `value` is then the largest distance from the
    /// start point, not normalized.
    pub degenerate: bool,
}

fn dist_to_segment(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| y - x).collect();
    let ap: Vec<f64> = a.iter().zip(p).map(|(x, y)| y - x).collect();
    let len2: f64 = ab.iter().map(|v| v * v).sum();
    let s = (ap.iter().zip(&ab).map(|(u, v)| u * v).sum::<f64>() / len2).clamp(0.0, 1.0);
    norm2(&ap.iter().zip(&ab).map(|(u, v)| u - s * v).collect::<Vec<_>>())
}

/// Largest distance of an interior point to the chord from first to last
/// state, divided by the chord length.
pub fn straightness_deviation(traj: &Trajectory) -> Result<Straightness> {
    let n = traj.states.len();
    if n < 3 {
        return Err(Error::Config(format!("straightness needs >= 3 recorded points, got {n}")));
    }
    let first = &traj.states[0];
    let last = &traj.states[n - 1];
    let chord = norm2(&first.iter().zip(last).map(|(a, b)| b - a).collect::<Vec<_>>());
    let scale = traj.states.iter().map(|s| norm2(s)).fold(1.0, f64::max);
    if chord <= 1e-12 * scale {
        let value = traj.states[1..n - 1]
            .iter()
            .map(|p| norm2(&p.iter().zip(first).map(|(a, b)| a - b).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        return Ok(Straightness { value, degenerate: true });
    }
    let value = traj.states[1..n - 1]
        .iter()
        .map(|p| dist_to_segment(p, first, last))
        .fold(0.0, f64::max);
    Ok(Straightness {
        value: value / chord,
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStage {
    pub field: ControlSynthField,
    pub horizon: f64,
}

/// A pretrained field on `[0, 1]`, optionally followed by a residual field on
/// `[1, 1+T]` conditioned on the handoff state.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    pub base: AnyField,
    pub residual: Option<ResidualStage>,
}

impl FlowModel {
    pub fn new(base: AnyField) -> Self {
        FlowModel { base, residual: None }
    }

    pub fn with_residual(base: AnyField, field: ControlSynthField, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::Config(format!("residual horizon must be > 0, got {horizon}")));
        }
        if field.dim() != base.dim() || field.config().input_dim != base.dim() {
            return Err(Error::dim("residual field dims", base.dim(), field.dim()));
        }
        Ok(FlowModel {
            base,
            residual: Some(ResidualStage { field, horizon }),
        })
    }

    /// Rebuild from checkpoints; a residual checkpoint must name the base's hash.
    pub fn from_checkpoints(base: &Checkpoint, residual: Option<&Checkpoint>) -> Result<Self> {
        let field = base.to_field()?;
        let Some(rck) = residual else {
            return Ok(FlowModel::new(field));
        };
        let info = rck
            .residual
            .as_ref()
            .ok_or_else(|| Error::Config("residual checkpoint lacks base hash and horizon".into()))?;
        let hash = base.content_hash();
        if info.base_hash != hash {
            return Err(Error::Config(format!(
                "residual was trained on base {} but the given base hashes to {hash}",
                info.base_hash
            )));
        }
        FlowModel::with_residual(field, rck.to_controlsynth()?, info.horizon)
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    pub fn end_time(&self) -> f64 {
        1.0 + self.residual.as_ref().map_or(0.0, |r| r.horizon)
    }

    /// Push every row of `x0` through the full model.
    pub fn sample(&self, x0: &Mat, solver: &SolverConfig) -> Result<BatchSolve> {
        let stage1 = integrate_batch(&self.base, x0, 0.0, 1.0, solver)?;
        let Some(res) = &self.residual else {
            return Ok(stage1);
        };
        let h = &stage1.final_states;
        let stage2 = if solver.is_fixed_step() {
            let cond = Conditioned::new(&res.field, h.clone())?;
            integrate_batch(&cond, h, 1.0, 1.0 + res.horizon, solver)?
        } else {
            let mut finals = Mat::zeros(h.rows(), h.cols());
            let mut nfe = Vec::with_capacity(h.rows());
            for i in 0..h.rows() {
                let cond = Conditioned::new(&res.field, Mat::row_vector(h.row(i)))?;
                let tr = integrate(&cond, h.row(i), 1.0, 1.0 + res.horizon, solver)?;
                finals.row_mut(i).copy_from_slice(tr.final_state());
                nfe.push(tr.nfe);
            }
            BatchSolve {
                final_states: finals,
                nfe_per_sample: nfe,
            }
        };
        Ok(BatchSolve {
            final_states: stage2.final_states,
            nfe_per_sample: stage1
                .nfe_per_sample
                .iter()
                .zip(&stage2.nfe_per_sample)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Recorded path of a single sample across both stages.
    pub fn trajectory(&self, x0: &[f64], solver: &SolverConfig) -> Result<Trajectory> {
        let solver = solver.clone().recording();
        let mut tr = integrate(&self.base, x0, 0.0, 1.0, &solver)?;
        if let Some(res) = &self.residual {
            let h = tr.final_state().to_vec();
            let cond = Conditioned::new(&res.field, Mat::row_vector(&h))?;
            let t2 = integrate(&cond, &h, 1.0, 1.0 + res.horizon, &solver)?;
            tr.times.extend_from_slice(&t2.times[1..]);
            tr.states.extend_from_slice(&t2.states[1..]);
            tr.nfe += t2.nfe;
            tr.accepted_steps += t2.accepted_steps;
            tr.rejected_steps += t2.rejected_steps;
        }
        Ok(tr)
    }
}

/// One paired sample with its reconstruction and conditional error
/// `ε = x1 − φ̂(x0)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelErrorSample {
    pub x0: Vec<f64>,
    pub x1: Vec<f64>,
    pub reconstruction: Vec<f64>,
    pub error: Vec<f64>,
}

pub fn model_errors(model: &FlowModel, batch: &CouplingBatch, solver: &SolverConfig) -> Result<Vec<ModelErrorSample>> {
    if batch.is_empty() {
        return Err(Error::Config("model_errors needs a nonempty batch".into()));
    }
    let out = model.sample(&batch.x0, solver)?;
    Ok((0..batch.len())
        .map(|i| {
            let rec = out.final_states.row(i).to_vec();
            ModelErrorSample {
                x0: batch.x0.row(i).to_vec(),
                x1: batch.x1.row(i).to_vec(),
                error: batch.x1.row(i).iter().zip(&rec).map(|(a, b)| a - b).collect(),
                reconstruction: rec,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub mse: f64,
    pub mean_nfe: f64,
}

/// Mean `‖x1 − φ̂(x0)‖²` over the batch, inference mode.
pub fn reconstruction_mse(batch: &CouplingBatch, model: &FlowModel, solver: &SolverConfig) -> Result<Reconstruction> {
    if batch.is_empty() {
        return Err(Error::Config("reconstruction_mse needs a nonempty batch".into()));
    }
    let out = model.sample(&batch.x0, solver)?;
    let total: f64 = (0..batch.len())
        .map(|i| {
            batch
                .x1
                .row(i)
                .iter()
                .zip(out.final_states.row(i))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(Reconstruction {
        mse: total / batch.len() as f64,
        mean_nfe: out.mean_nfe(),
    })
}

/// Held-out pairs built from independent blocks of `block` draws, each
/// coupled on its own, so the pairing matches what training batches of that
/// size see. `count` must be a multiple of `block`.
pub fn heldout_pairs(
    sampler: &mut dyn PairSampler,
    count: usize,
    block: usize,
    method: CouplingMethod,
    rng: &mut Rng,
) -> Result<CouplingBatch> {
    if block == 0 || count == 0 || count % block != 0 {
        return Err(Error::Config(format!(
            "held-out count {count} must be a positive multiple of the block size {block}"
        )));
    }
    let mut x0 = Vec::new();
    let mut x1 = Vec::new();
    let mut cost = 0.0;
    for _ in 0..count / block {
        let (a, b) = sampler.draw(block, rng)?;
        let batch = couple(&a, &b, method)?;
        cost += batch.cost;
        x0.extend_from_slice(batch.x0.data());
        x1.extend_from_slice(batch.x1.data());
    }
    let d = x0.len() / count;
    Ok(CouplingBatch {
        x0: Mat::from_vec(count, d, x0)?,
        x1: Mat::from_vec(count, d, x1)?,
        method,
        cost,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub w2: f64,
    pub recon_mse: f64,
    pub mean_nfe: f64,
    /// `None` when no trajectory had enough recorded points.
    pub straightness_mean: Option<f64>,
}

/// Generated-vs-data W2 on `noise`/`data`, reconstruction on `pairs`, and
/// mean straightness over the first `straightness_samples` noise rows.
pub fn evaluate(
    model: &FlowModel,
    noise: &Mat,
    data: &Mat,
    pairs: &CouplingBatch,
    solver: &SolverConfig,
    straightness_samples: usize,
) -> Result<EvalSummary> {
    let generated = model.sample(noise, solver)?;
    let w2 = wasserstein2(&generated.final_states, data)?;
    let rec = reconstruction_mse(pairs, model, solver)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..straightness_samples.min(noise.rows()) {
        let tr = model.trajectory(noise.row(i), solver)?;
        if tr.states.len() >= 3 {
            total += straightness_deviation(&tr)?.value;
            count += 1;
        }
    }
    Ok(EvalSummary {
        w2,
        recon_mse: rec.mse,
        mean_nfe: generated.mean_nfe(),
        straightness_mean: (count > 0).then(|| total / count as f64),
    })
}
