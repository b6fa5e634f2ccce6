//! The `fmlab` command line.
//!
//! Each subcommand writes its artifacts and a `manifest.json` into one run
//! directory. [`run`] returns the process exit code: 0 when no bound,
//! certificate or training check was violated, 1 otherwise.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::bounds::{analytic_suite, run_case, write_report_csv};
use crate::checkpoint::{AnyField, Checkpoint};
use crate::config::Config;
use crate::datasets::{self, DatasetSpec};
use crate::error::{Error, Result};
use crate::fields::{BoxDomain, Conditioned, ControlSynthField, VectorField};
use crate::finetune::{field_omega, finetune, finetune_residual, Sigma};
use crate::linalg::{norm2, Mat};
use crate::metrics::{evaluate, heldout_pairs, reconstruction_mse, wasserstein2, FlowModel};
use crate::rng::Rng;
use crate::stability::{
    contraction_probe, contraction_region, search_contraction, search_iss, verify, ContractionLyapunov,
    ContractionProbe, StabilityCertificate,
};
use crate::train::{pretrain, TrainOutcome};

#[derive(Parser, Debug)]
#[command(name = "fmlab", version, about = "Flow-matching laboratory")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Run directory, overriding output.root and output.name.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
    /// Overrides train.seed, finetune.seed and dataset.eval_seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct FinetuneFlags {
    /// Residual window length T.
    #[arg(long = "horizon-T")]
    pub horizon_t: Option<f64>,
    /// Dominance penalty weight.
    #[arg(long)]
    pub lambda_omega: Option<f64>,
    /// Scalar variance or comma-separated diagonal, e.g. `1.0` or `1,4`.
    #[arg(long)]
    pub sigma: Option<String>,
    /// Keep the pretrained field frozen and train a residual on [1, 1+T].
    #[arg(long)]
    pub freeze_pretrained: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// CFM pretraining from scratch.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// MLE fine-tuning of a pretrained checkpoint.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: FinetuneFlags,
    },
    /// Residual ControlSynth fine-tuning on top of a frozen checkpoint.
    FinetuneResidual {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        flags: FinetuneFlags,
    },
    /// Generate samples from noise.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        residual: Option<PathBuf>,
        /// Sample count; defaults to dataset.eval_samples.
        #[arg(long)]
        count: Option<usize>,
        /// Also export this many full trajectories.
        #[arg(long, default_value_t = 0)]
        trajectories: usize,
    },
    /// W2, reconstruction MSE, NFE and straightness.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        residual: Option<PathBuf>,
    },
    /// Verify ISS and contraction certificates of a ControlSynth checkpoint.
    AnalyzeStability {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Certificate JSON; overrides stability.certificate.
        #[arg(long)]
        certificate: Option<PathBuf>,
    },
    /// Check the error bounds on the analytic suite.
    VerifyBounds {
        #[command(flatten)]
        common: Common,
    },
    /// Integrate nearby trajectory pairs and report the decay of their gap.
    ProbeContraction {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Serialize)]
struct InputRef {
    role: &'static str,
    path: String,
    hash: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'static str,
    args: Vec<String>,
    seed: u64,
    config: &'a Config,
    inputs: Vec<InputRef>,
    /// Content hash of the checkpoint this run produced, if any.
    checkpoint_hash: Option<String>,
    artifacts: Vec<String>,
    metrics: Value,
    violations: Vec<String>,
}

struct Run<'a> {
    command: &'a str,
    dir: PathBuf,
    config: Config,
    seed: u64,
    inputs: Vec<InputRef>,
    checkpoint_hash: Option<String>,
    artifacts: Vec<String>,
    violations: Vec<String>,
}

impl<'a> Run<'a> {
    fn new(command: &'a str, common: &Common) -> Result<Self> {
        let mut config = match &common.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        if let Some(s) = common.seed {
            config.train.seed = s;
            config.finetune.seed = s;
            config.dataset.eval_seed = s;
        }
        let dir = common.out.clone().unwrap_or_else(|| config.output.run_dir(command));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Run {
            command,
            dir,
            seed: config.train.seed,
            config,
            inputs: Vec::new(),
            checkpoint_hash: None,
            artifacts: Vec::new(),
            violations: Vec::new(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.dir.join(name)
    }

    fn create(&mut self, name: &str) -> Result<BufWriter<File>> {
        let path = self.path(name);
        File::create(&path).map(BufWriter::new).map_err(|e| Error::io(&path, e))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        std::fs::write(&path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(&path, e))
    }

    fn load_input(&mut self, role: &'static str, path: &Path) -> Result<Checkpoint> {
        let ck = Checkpoint::load(path)?;
        self.inputs.push(InputRef {
            role,
            path: path.display().to_string(),
            hash: ck.content_hash(),
        });
        Ok(ck)
    }

    fn save_checkpoint(&mut self, name: &str, ck: &Checkpoint) -> Result<()> {
        let path = self.path(name);
        ck.save(path)?;
        self.checkpoint_hash = Some(ck.content_hash());
        Ok(())
    }

    fn save_outcome(&mut self, final_name: &str, out: &TrainOutcome) -> Result<()> {
        for ck in &out.checkpoints[..out.checkpoints.len() - 1] {
            self.save_checkpoint(&format!("checkpoints/step_{:06}.json", ck.training_step), ck)?;
        }
        self.save_checkpoint(final_name, out.final_checkpoint())?;
        let mut w = self.create("loss.csv")?;
        out.write_curve_csv(&mut w).map_err(|e| Error::io(self.dir.join("loss.csv"), e))
    }

    /// Keep the last good checkpoint of a diverged run and record the failure.
    fn training_result(&mut self, result: Result<TrainOutcome>) -> Result<Option<TrainOutcome>> {
        match result {
            Ok(out) => Ok(Some(out)),
            Err(Error::Diverged { step, last_good }) => {
                self.save_checkpoint("last_good.json", &last_good)?;
                self.violations.push(format!("training diverged at step {step}"));
                Ok(None)
            }
            Err(e) => Err(e),
        }
    }

    fn finish(self, metrics: Value) -> Result<i32> {
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            args: std::env::args().collect(),
            seed: self.seed,
            config: &self.config,
            inputs: self.inputs,
            checkpoint_hash: self.checkpoint_hash,
            artifacts: self.artifacts,
            metrics,
            violations: self.violations.clone(),
        };
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&path, e))?;
        for v in &self.violations {
            eprintln!("violation: {v}");
        }
        Ok(if self.violations.is_empty() { 0 } else { 1 })
    }
}

fn apply_flags(cfg: &mut Config, flags: &FinetuneFlags) -> Result<()> {
    if let Some(t) = flags.horizon_t {
        cfg.finetune.horizon = t;
    }
    if let Some(l) = flags.lambda_omega {
        cfg.finetune.lambda_omega = l;
    }
    if let Some(s) = &flags.sigma {
        cfg.finetune.sigma = s.parse::<Sigma>()?;
    }
    cfg.finetune.validate(cfg.field.dim)
}

/// Held-out pairs coupled in blocks of the fine-tuning batch size.
fn eval_pairs(cfg: &Config) -> Result<crate::coupling::CouplingBatch> {
    let block = cfg.finetune.batch_size;
    let count = (cfg.dataset.eval_pairs / block).max(1) * block;
    let mut rng = Rng::new(cfg.dataset.eval_seed).fork(1);
    heldout_pairs(&mut cfg.dataset.pairs(), count, block, cfg.finetune.coupling, &mut rng)
}

/// Noise and data batches for the W2 term.
fn eval_sets(cfg: &Config, count: usize) -> Result<(Mat, Mat)> {
    let mut rng = Rng::new(cfg.dataset.eval_seed).fork(2);
    let noise = datasets::sample(&DatasetSpec::standard_gaussian(count), &mut rng)?;
    let data = datasets::sample(&cfg.dataset.target().with_count(count), &mut rng)?;
    Ok((noise, data))
}

fn quality(model: &FlowModel, cfg: &Config, pairs: &crate::coupling::CouplingBatch) -> Result<Value> {
    let (noise, data) = eval_sets(cfg, cfg.dataset.eval_samples)?;
    let generated = model.sample(&noise, &cfg.solver)?;
    let rec = reconstruction_mse(pairs, model, &cfg.solver)?;
    Ok(json!({
        "recon_mse": rec.mse,
        "w2": wasserstein2(&generated.final_states, &data)?,
        "mean_nfe": generated.mean_nfe(),
    }))
}

fn cmd_pretrain(common: &Common) -> Result<i32> {
    let mut run = Run::new("pretrain", common)?;
    let cfg = run.config.clone();
    let mut field = cfg.field.build(&mut Rng::new(cfg.train.seed).fork(0))?;
    let result = pretrain(&mut field, &mut cfg.dataset.pairs(), &cfg.train);
    let Some(out) = run.training_result(result)? else {
        return run.finish(Value::Null);
    };
    run.save_outcome("pretrained.json", &out)?;
    let smoothed = out.smoothed_loss(50);
    run.finish(json!({
        "steps": out.curve.len(),
        "final_loss": out.curve.last().map(|c| c.loss),
        "smoothed_final_loss": smoothed.last(),
    }))
}

fn cmd_finetune(common: &Common, checkpoint: &Path, flags: &FinetuneFlags) -> Result<i32> {
    if flags.freeze_pretrained {
        return cmd_finetune_residual(common, checkpoint, flags);
    }
    let mut run = Run::new("finetune", common)?;
    apply_flags(&mut run.config, flags)?;
    let cfg = run.config.clone();
    let mut field = run.load_input("pretrained", checkpoint)?.to_field()?;
    let pairs = eval_pairs(&cfg)?;
    let before = quality(&FlowModel::new(field.clone()), &cfg, &pairs)?;
    let result = finetune(&mut field, &mut cfg.dataset.pairs(), &cfg.finetune);
    let Some(out) = run.training_result(result)? else {
        return run.finish(json!({ "before": before }));
    };
    run.save_outcome("finetuned.json", &out)?;
    let after = quality(&FlowModel::new(field), &cfg, &pairs)?;
    let metrics = json!({ "before": before, "after": after });
    run.write_json("metrics.json", &metrics)?;
    run.finish(metrics)
}

fn cmd_finetune_residual(common: &Common, checkpoint: &Path, flags: &FinetuneFlags) -> Result<i32> {
    let mut run = Run::new("finetune-residual", common)?;
    apply_flags(&mut run.config, flags)?;
    let cfg = run.config.clone();
    let base = run.load_input("pretrained", checkpoint)?.to_field()?;
    let mut residual = cfg.field.controlsynth(&mut Rng::new(cfg.finetune.seed).fork(0))?;
    let pairs = eval_pairs(&cfg)?;
    let before = quality(&FlowModel::new(base.clone()), &cfg, &pairs)?;
    let result = finetune_residual(&base, &mut residual, &mut cfg.dataset.pairs(), &cfg.finetune);
    let Some(out) = run.training_result(result)? else {
        return run.finish(json!({ "before": before }));
    };
    run.save_outcome("residual.json", &out)?;
    let residual = out.final_checkpoint().to_controlsynth()?;
    let omega = field_omega(&residual, cfg.finetune.eps_a)?;
    let model = FlowModel::with_residual(base, residual, cfg.finetune.horizon)?;
    let after = quality(&model, &cfg, &pairs)?;
    let metrics = json!({
        "before": before,
        "after": after,
        "omega": omega,
        "penalty": cfg.finetune.lambda_omega * omega.max(0.0),
    });
    run.write_json("metrics.json", &metrics)?;
    run.finish(metrics)
}

fn load_model(run: &mut Run, checkpoint: &Path, residual: Option<&Path>) -> Result<FlowModel> {
    let base = run.load_input("base", checkpoint)?;
    let res = residual.map(|p| run.load_input("residual", p)).transpose()?;
    FlowModel::from_checkpoints(&base, res.as_ref())
}

fn cmd_sample(
    common: &Common,
    checkpoint: &Path,
    residual: Option<&Path>,
    count: Option<usize>,
    trajectories: usize,
) -> Result<i32> {
    let mut run = Run::new("sample", common)?;
    let model = load_model(&mut run, checkpoint, residual)?;
    let cfg = run.config.clone();
    let count = count.unwrap_or(cfg.dataset.eval_samples);
    let noise = datasets::sample(&DatasetSpec::standard_gaussian(count), &mut Rng::new(cfg.dataset.eval_seed))?;
    let out = model.sample(&noise, &cfg.solver)?;
    let mut w = run.create("samples.csv")?;
    datasets::write_csv(&mut w, &out.final_states).map_err(|e| Error::io("samples.csv", e))?;
    for i in 0..trajectories.min(count) {
        let tr = model.trajectory(noise.row(i), &cfg.solver)?;
        let name = format!("trajectories/traj_{i:04}.csv");
        std::fs::create_dir_all(run.dir.join("trajectories")).map_err(|e| Error::io(&run.dir, e))?;
        let mut w = run.create(&name)?;
        tr.write_csv(&mut w).map_err(|e| Error::io(&name, e))?;
    }
    run.finish(json!({ "count": count, "mean_nfe": out.mean_nfe() }))
}

fn cmd_eval(common: &Common, checkpoint: &Path, residual: Option<&Path>) -> Result<i32> {
    let mut run = Run::new("eval", common)?;
    let model = load_model(&mut run, checkpoint, residual)?;
    let cfg = run.config.clone();
    let pairs = eval_pairs(&cfg)?;
    let (noise, data) = eval_sets(&cfg, cfg.dataset.eval_samples)?;
    let summary = evaluate(&model, &noise, &data, &pairs, &cfg.solver.clone().recording(), 16)?;
    run.write_json("eval.json", &summary)?;
    run.finish(serde_json::to_value(&summary)?)
}

/// The field a probe integrates: ControlSynth fields get the fixed input.
fn probe_field<'f>(field: &'f AnyField, cs_input: &Mat) -> Result<Box<dyn VectorField + 'f>> {
    Ok(match field {
        AnyField::ControlSynth(f) => Box::new(Conditioned::new(f, cs_input.clone())?),
        other => Box::new(other.clone()),
    })
}

fn probe_input(cfg: &Config) -> Mat {
    Mat::row_vector(&cfg.stability.input.clone().unwrap_or_else(|| vec![0.0; cfg.field.dim]))
}

fn write_probes(run: &mut Run, probes: &[ContractionProbe]) -> Result<()> {
    let mut s = String::from("probe,t,norm\n");
    for (i, p) in probes.iter().enumerate() {
        for (t, n) in p.times.iter().zip(&p.norms) {
            s.push_str(&format!("{i},{t:?},{n:?}\n"));
        }
    }
    let path = run.path("probes.csv");
    std::fs::write(&path, s).map_err(|e| Error::io(&path, e))
}

fn cmd_analyze_stability(common: &Common, checkpoint: &Path, certificate: Option<&Path>) -> Result<i32> {
    let mut run = Run::new("analyze-stability", common)?;
    let cfg = run.config.clone();
    let field: ControlSynthField = run.load_input("field", checkpoint)?.to_controlsynth()?;
    let tol = cfg.stability.tol;
    let supplied = certificate.map(Path::to_path_buf).or(cfg.stability.certificate.clone());
    let (cert, source) = match &supplied {
        Some(p) => (StabilityCertificate::load(p)?, p.display().to_string()),
        None => {
            let iss = search_iss(&field, tol)?;
            let con = search_contraction(&field, tol)?;
            (
                StabilityCertificate {
                    iss: iss.certificate.iss,
                    contraction: con.certificate.contraction,
                },
                "heuristic search".to_string(),
            )
        }
    };
    let verdict = verify(&field, &cert, tol)?;
    if supplied.is_some() {
        let missing = |s: &String| s.starts_with("no ");
        run.violations.extend(verdict.violated.iter().filter(|s| !missing(s)).cloned());
    }
    run.write_json("certificate.json", &cert)?;

    let mut region = None;
    let mut ratios = Vec::new();
    if verdict.contraction_ok {
        let probe_box = BoxDomain::cube(field.dim(), cfg.stability.probe_box);
        let r = contraction_region(&field, &cert, tol, &probe_box, cfg.stability.region_grid)?;
        let lyap = ContractionLyapunov::new(&field, &cert)?;
        let cond = Conditioned::new(&field, probe_input(&cfg))?;
        let mut rng = Rng::new(cfg.dataset.eval_seed).fork(3);
        let mut probes = Vec::new();
        while probes.len() < cfg.stability.probes {
            let x0 = probe_box.sample(&mut rng);
            let d0 = probe_box.sample(&mut rng);
            if norm2(&d0) == 0.0 || !r.contains(&lyap, &d0) {
                continue;
            }
            let p = contraction_probe(&cond, &x0, &d0, cfg.stability.probe_horizon, &cfg.solver, 20)?;
            if !(p.ratio < 1.0) {
                run.violations.push(format!("certified field failed to contract: ratio {} from d0 = {d0:?}", p.ratio));
            }
            ratios.push(p.ratio);
            probes.push(p);
        }
        write_probes(&mut run, &probes)?;
        region = Some(r);
    }
    let report = json!({
        "certificate_source": source,
        "verdict": verdict,
        "region": region,
        "probe_ratio_max": ratios.iter().copied().fold(None, |m: Option<f64>, r| Some(m.map_or(r, |m| m.max(r)))),
    });
    run.write_json("verdict.json", &report)?;
    run.finish(report)
}

fn cmd_verify_bounds(common: &Common) -> Result<i32> {
    let mut run = Run::new("verify-bounds", common)?;
    let reports = analytic_suite().iter().map(run_case).collect::<Result<Vec<_>>>()?;
    for r in reports.iter().filter(|r| !r.pass) {
        run.violations.push(format!(
            "bound violated in {}: measured {} > bound {}",
            r.case, r.measured, r.bound_variable
        ));
    }
    let path = run.path("bounds.csv");
    write_report_csv(&reports, path)?;
    let passed = reports.iter().filter(|r| r.pass).count();
    run.finish(json!({ "cases": reports.len(), "passed": passed }))
}

fn cmd_probe_contraction(common: &Common, checkpoint: &Path) -> Result<i32> {
    let mut run = Run::new("probe-contraction", common)?;
    let cfg = run.config.clone();
    let field = run.load_input("field", checkpoint)?.to_field()?;
    let input = probe_input(&cfg);
    let vf = probe_field(&field, &input)?;
    let probe_box = BoxDomain::cube(field.dim(), cfg.stability.probe_box);
    let mut rng = Rng::new(cfg.dataset.eval_seed).fork(3);
    let mut probes = Vec::with_capacity(cfg.stability.probes);
    for _ in 0..cfg.stability.probes {
        let x0 = probe_box.sample(&mut rng);
        let d0 = probe_box.sample(&mut rng);
        probes.push(contraction_probe(
            vf.as_ref(),
            &x0,
            &d0,
            cfg.stability.probe_horizon,
            &cfg.solver,
            20,
        )?);
    }
    write_probes(&mut run, &probes)?;
    let ratios: Vec<f64> = probes.iter().map(|p| p.ratio).collect();
    let contracting = ratios.iter().filter(|&&r| r < 1.0).count();
    run.finish(json!({
        "probes": ratios.len(),
        "contracting": contracting,
        "ratio_max": ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        "ratio_mean": ratios.iter().sum::<f64>() / ratios.len() as f64,
    }))
}

/// Execute a parsed command line and return the exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Pretrain { common } => cmd_pretrain(common),
        Command::Finetune {
            common,
            checkpoint,
            flags,
        } => cmd_finetune(common, checkpoint, flags),
        Command::FinetuneResidual {
            common,
            checkpoint,
            flags,
        } => cmd_finetune_residual(common, checkpoint, flags),
        Command::Sample {
            common,
            checkpoint,
            residual,
            count,
            trajectories,
        } => cmd_sample(common, checkpoint, residual.as_deref(), *count, *trajectories),
        Command::Eval {
            common,
            checkpoint,
            residual,
        } => cmd_eval(common, checkpoint, residual.as_deref()),
        Command::AnalyzeStability {
            common,
            checkpoint,
            certificate,
        } => cmd_analyze_stability(common, checkpoint, certificate.as_deref()),
        Command::VerifyBounds { common } => cmd_verify_bounds(common),
        Command::ProbeContraction { common, checkpoint } => cmd_probe_contraction(common, checkpoint),
    }
}
