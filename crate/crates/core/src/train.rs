//! Simulation-free pretraining with the conditional flow-matching loss on the
//! straight path `ψ_t = (1−t)x0 + t·x1`, target `x1 − x0`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::checkpoint::Checkpoint;
use crate::coupling::{couple, CouplingBatch, CouplingMethod};
use crate::datasets::{self, DatasetSpec};
use crate::error::{Error, Result};
use crate::fields::{Trainable, VectorField};
use crate::linalg::Mat;
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    pub coupling: CouplingMethod,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_interval: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            steps: 2000,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            coupling: CouplingMethod::MinibatchOt,
            seed: 0,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip must be > 0, got {}", self.grad_clip)));
        }
        self.adam().validate()
    }
}

/// Source of raw `(x0, x1)` batches before coupling.
pub trait PairSampler {
    fn draw(&mut self, n: usize, rng: &mut Rng) -> Result<(Mat, Mat)>;
}

/// Independent draws from a source and a target dataset.
#[derive(Clone, Debug)]
pub struct DatasetPairs {
    pub source: DatasetSpec,
    pub target: DatasetSpec,
}

impl PairSampler for DatasetPairs {
    fn draw(&mut self, n: usize, rng: &mut Rng) -> Result<(Mat, Mat)> {
        let x0 = datasets::sample(&self.source.clone().with_count(n), rng)?;
        let x1 = datasets::sample(&self.target.clone().with_count(n), rng)?;
        Ok((x0, x1))
    }
}

/// Rows drawn with replacement from a fixed paired set, pairing preserved.
#[derive(Clone, Debug)]
pub struct FixedPairs {
    pub x0: Mat,
    pub x1: Mat,
}

impl PairSampler for FixedPairs {
    fn draw(&mut self, n: usize, rng: &mut Rng) -> Result<(Mat, Mat)> {
        if self.x0.rows() == 0 || self.x0.rows() != self.x1.rows() {
            return Err(Error::dim("fixed pair set", self.x0.rows(), self.x1.rows()));
        }
        let idx: Vec<usize> = (0..n).map(|_| rng.below(self.x0.rows())).collect();
        let batch = CouplingBatch {
            x0: self.x0.clone(),
            x1: self.x1.clone(),
            method: CouplingMethod::Independent,
            cost: 0.0,
        }
        .select(&idx);
        Ok((batch.x0, batch.x1))
    }
}

/// `t ~ U[0, 1]`, one per sample.
pub fn sample_times(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| rng.uniform()).collect()
}

/// Record the CFM loss on `g`.
pub fn cfm_loss_node<'a>(
    g: &mut Graph<'a>,
    field: &'a dyn VectorField,
    params: &[NodeId],
    batch: &CouplingBatch,
    t: &[f64],
) -> Result<NodeId> {
    if batch.is_empty() {
        return Err(Error::Config("cfm_loss needs a nonempty batch".into()));
    }
    if t.len() != batch.len() {
        return Err(Error::dim("cfm_loss times", batch.len(), t.len()));
    }
    if batch.x0.cols() != field.dim() {
        return Err(Error::dim("cfm_loss state dim", field.dim(), batch.x0.cols()));
    }
    let mut xt = Mat::zeros(batch.len(), field.dim());
    for (i, &ti) in t.iter().enumerate() {
        for (k, v) in xt.row_mut(i).iter_mut().enumerate() {
            *v = (1.0 - ti) * batch.x0[(i, k)] + ti * batch.x1[(i, k)];
        }
    }
    let target = batch.x1.sub(&batch.x0);
    let xt = g.constant(xt);
    let target = g.constant(target);
    let v = field.forward(g, params, t, xt);
    let diff = g.sub(v, target);
    Ok(g.mean_sq(diff))
}

/// Mean over the batch of `‖v(t_i, ψ_{t_i}) − (x1_i − x0_i)‖²`.
pub fn cfm_loss(field: &dyn VectorField, batch: &CouplingBatch, t: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let p = field.params().bind_frozen(&mut g);
    let loss = cfm_loss_node(&mut g, field, &p, batch, t)?;
    Ok(g.scalar(loss))
}

/// CFM loss and the gradient for every trainable parameter.
pub fn cfm_loss_and_grads(field: &dyn VectorField, batch: &CouplingBatch, t: &[f64]) -> Result<(f64, Vec<Option<Mat>>)> {
    let mut g = Graph::new();
    let p = field.params().bind(&mut g);
    let loss = cfm_loss_node(&mut g, field, &p, batch, t)?;
    let mut grads = g.backward(loss);
    Ok((g.scalar(loss), field.params().collect_grads(&p, &mut grads)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Interval checkpoints followed by the final one.
    pub checkpoints: Vec<Checkpoint>,
    pub curve: Vec<CurvePoint>,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        self.checkpoints.last().expect("training always emits a final checkpoint")
    }

    /// Trailing moving average of the loss over `window` steps.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let losses: Vec<f64> = self.curve.iter().map(|c| c.loss).collect();
        (0..losses.len())
            .map(|i| {
                let lo = (i + 1).saturating_sub(w);
                losses[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
            })
            .collect()
    }

    /// CSV with header `step,loss,grad_norm`.
    pub fn write_curve_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,loss,grad_norm")?;
        for c in &self.curve {
            writeln!(w, "{},{:?},{:?}", c.step, c.loss, c.grad_norm)?;
        }
        Ok(())
    }
}

pub(crate) struct LoopSettings<'s> {
    pub adam: AdamConfig,
    pub grad_clip: f64,
    pub steps: usize,
    pub seed: u64,
    pub checkpoint_interval: usize,
    pub tag: &'s str,
}

/// Shared optimizer loop. `step_loss` returns the loss and gradients at the
/// current parameters. A non-finite loss or gradient aborts with the last
/// parameters that produced a finite loss.
pub(crate) fn run_loop<F: Trainable>(
    field: &mut F,
    settings: LoopSettings<'_>,
    mut step_loss: impl FnMut(&F, &mut Rng) -> Result<(f64, Vec<Option<Mat>>)>,
    mut finish: impl FnMut(Checkpoint) -> Checkpoint,
) -> Result<TrainOutcome> {
    let mut rng = Rng::new(settings.seed);
    let mut opt = Adam::new(settings.adam, field.params())?;
    let mut checkpoints = Vec::new();
    let mut curve = Vec::with_capacity(settings.steps);
    // parameters before the most recent update, which produced a finite loss
    let mut previous: Option<F> = None;
    for step in 1..=settings.steps {
        let (loss, grads) = step_loss(field, &mut rng)?;
        let finite = loss.is_finite() && grads.iter().flatten().all(Mat::is_finite);
        if !finite {
            let (good, good_step) = match &previous {
                Some(p) => (p, step - 2),
                None => (&*field, 0),
            };
            let last_good = finish(good.checkpoint(settings.seed, good_step)).with_tag("last_good");
            return Err(Error::Diverged {
                step,
                last_good: Box::new(last_good),
            });
        }
        previous = Some(field.clone());
        let params = field.params_mut();
        params.store_grads(grads);
        let grad_norm = clip_grad_norm(params, settings.grad_clip);
        opt.step(params);
        curve.push(CurvePoint { step, loss, grad_norm });
        if settings.checkpoint_interval > 0 && step % settings.checkpoint_interval == 0 && step < settings.steps {
            checkpoints.push(finish(field.checkpoint(settings.seed, step)));
        }
    }
    checkpoints.push(finish(field.checkpoint(settings.seed, settings.steps)).with_tag(settings.tag));
    Ok(TrainOutcome { checkpoints, curve })
}

pub fn pretrain<F: Trainable>(field: &mut F, sampler: &mut dyn PairSampler, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let settings = LoopSettings {
        adam: cfg.adam(),
        grad_clip: cfg.grad_clip,
        steps: cfg.steps,
        seed: cfg.seed,
        checkpoint_interval: cfg.checkpoint_interval,
        tag: "pretrained",
    };
    run_loop(
        field,
        settings,
        |f, rng| {
            let (x0, x1) = sampler.draw(cfg.batch_size, rng)?;
            let batch = couple(&x0, &x1, cfg.coupling)?;
            let t = sample_times(cfg.batch_size, rng);
            cfm_loss_and_grads(f, &batch, &t)
        },
        |ck| ck,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{AnalyticField, MlpConfig, MlpField};

    fn one_d(x0: f64, x1: f64) -> CouplingBatch {
        couple(&Mat::row_vector(&[x0]), &Mat::row_vector(&[x1]), CouplingMethod::Independent).unwrap()
    }

    #[test]
    fn exact_target_gives_zero() {
        let f = AnalyticField::constant(&[2.0]);
        assert_eq!(cfm_loss(&f, &one_d(0.0, 2.0), &[0.5]).unwrap(), 0.0);
    }

    #[test]
    fn zero_field_gives_squared_target() {
        let f = AnalyticField::constant(&[0.0]);
        assert_eq!(cfm_loss(&f, &one_d(0.0, 2.0), &[0.5]).unwrap(), 4.0);
    }

    #[test]
    fn zero_mlp_on_identical_pairs() {
        let f = MlpField::zeros(MlpConfig::default()).unwrap();
        let x = Mat::from_rows(&[&[1.0, 2.0], &[-3.0, 0.5]]);
        let b = couple(&x, &x, CouplingMethod::Independent).unwrap();
        assert_eq!(cfm_loss(&f, &b, &[0.2, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut f = MlpField::new(MlpConfig::default(), &mut Rng::new(1)).unwrap();
        let before = f.clone();
        let cfg = TrainConfig {
            lr: 0.0,
            steps: 5,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut pairs = DatasetPairs {
            source: DatasetSpec::standard_gaussian(1),
            target: DatasetSpec::new(datasets::DatasetName::TwoMoons, 1),
        };
        let out = pretrain(&mut f, &mut pairs, &cfg).unwrap();
        assert_eq!(f.params().flat_values(), before.params().flat_values());
        assert_eq!(out.final_checkpoint().content_hash(), Checkpoint::from_mlp(&before, 0, 0).content_hash());
        assert_eq!(out.final_checkpoint().tag, "pretrained");
        assert_eq!(out.curve.len(), 5);
    }

    #[test]
    fn huge_lr_diverges_with_last_good() {
        let mut f = MlpField::new(MlpConfig::default(), &mut Rng::new(1)).unwrap();
        let cfg = TrainConfig {
            lr: 1e300,
            steps: 50,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let mut pairs = DatasetPairs {
            source: DatasetSpec::standard_gaussian(1),
            target: DatasetSpec::standard_gaussian(1).with_shift([2.0, 0.0]),
        };
        match pretrain(&mut f, &mut pairs, &cfg) {
            Err(Error::Diverged { step, last_good }) => {
                assert!(step >= 2);
                assert_eq!(last_good.training_step, step - 2);
                let good = last_good.to_mlp().unwrap();
                let (x0, x1) = pairs.draw(8, &mut Rng::new(0)).unwrap();
                let b = couple(&x0, &x1, CouplingMethod::Independent).unwrap();
                assert!(cfm_loss(&good, &b, &[0.5; 8]).unwrap().is_finite());
            }
            other => panic!("expected divergence, got {:?}", other.map(|o| o.curve.len())),
        }
    }

    #[test]
    fn curve_csv_header() {
        let out = TrainOutcome {
            checkpoints: vec![],
            curve: vec![CurvePoint {
                step: 1,
                loss: 0.5,
                grad_norm: 2.0,
            }],
        };
        let mut buf = Vec::new();
        out.write_curve_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss,grad_norm\n1,0.5,2.0\n");
    }
}
