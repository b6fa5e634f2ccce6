//! Experiment configuration: a sectioned TOML file.
//!
//! Every section is optional and falls back to defaults. Unknown keys are
//! collected across the whole file and reported together.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::{DatasetName, DatasetSpec};
use crate::error::{Error, Result};
use crate::fields::{Activation, ControlSynthConfig, ControlSynthField, MlpConfig, MlpField};
use crate::finetune::MleConfig;
use crate::checkpoint::AnyField;
use crate::rng::Rng;
use crate::solvers::SolverConfig;
use crate::train::{DatasetPairs, TrainConfig};

/// Overrides `output.root` when set.
pub const OUTPUT_ROOT_ENV: &str = "FMLAB_OUTPUT_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub dataset: DatasetSection,
    pub field: FieldSection,
    /// Solver used by `sample`, `eval` and the probes.
    pub solver: SolverConfig,
    pub train: TrainConfig,
    pub finetune: MleConfig,
    pub stability: StabilitySection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSection {
    /// Target distribution; the source is always a standard Gaussian.
    pub name: DatasetName,
    /// Defaults per dataset when absent.
    pub noise_scale: Option<f64>,
    pub shift: [f64; 2],
    /// Samples drawn by `sample` and for the W2 term of `eval`.
    pub eval_samples: usize,
    /// Held-out reconstruction pairs.
    pub eval_pairs: usize,
    /// Separate seed for evaluation draws.
    pub eval_seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            name: DatasetName::TwoMoons,
            noise_scale: None,
            shift: [0.0, 0.0],
            eval_samples: 512,
            eval_pairs: 2048,
            eval_seed: 1000,
        }
    }
}

impl DatasetSection {
    pub fn target(&self) -> DatasetSpec {
        let spec = DatasetSpec::new(self.name, 1).with_shift(self.shift);
        match self.noise_scale {
            Some(s) => spec.with_noise(s),
            None => spec,
        }
    }

    pub fn pairs(&self) -> DatasetPairs {
        DatasetPairs {
            source: DatasetSpec::standard_gaussian(1),
            target: self.target(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    #[default]
    Mlp,
    Controlsynth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub width: usize,
    #[serde(flatten)]
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldSection {
    /// Field trained by `pretrain`.
    pub kind: FieldKind,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub time_features: usize,
    /// ControlSynth blocks; also the residual field of `finetune-residual`.
    pub blocks: Vec<BlockSpec>,
    /// `A₀ = −decay·I` at initialisation.
    pub decay: f64,
}

impl Default for FieldSection {
    fn default() -> Self {
        FieldSection {
            kind: FieldKind::Mlp,
            dim: 2,
            hidden: vec![64, 64],
            time_features: 8,
            blocks: vec![BlockSpec {
                width: 16,
                activation: Activation::Tanh,
            }],
            decay: 1.0,
        }
    }
}

impl FieldSection {
    pub fn mlp_config(&self) -> MlpConfig {
        MlpConfig {
            dim: self.dim,
            hidden: self.hidden.clone(),
            time_features: self.time_features,
        }
    }

    pub fn controlsynth_config(&self) -> ControlSynthConfig {
        ControlSynthConfig {
            dim: self.dim,
            blocks: self.blocks.iter().map(|b| (b.width, b.activation)).collect(),
            input_dim: self.dim,
        }
    }

    pub fn controlsynth(&self, rng: &mut Rng) -> Result<ControlSynthField> {
        ControlSynthField::new(self.controlsynth_config(), self.decay, rng)
    }

    /// Freshly initialised field of the configured kind.
    pub fn build(&self, rng: &mut Rng) -> Result<AnyField> {
        Ok(match self.kind {
            FieldKind::Mlp => AnyField::Mlp(MlpField::new(self.mlp_config(), rng)?),
            FieldKind::Controlsynth => AnyField::ControlSynth(self.controlsynth(rng)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilitySection {
    /// Certificate JSON; when absent a heuristic search runs.
    pub certificate: Option<PathBuf>,
    pub tol: f64,
    /// Random `(x0, d0)` probes per analysis.
    pub probes: usize,
    pub probe_horizon: f64,
    /// Half-width of the probing box for starts and perturbations.
    pub probe_box: f64,
    pub region_grid: usize,
    /// Conditioning input `u` for ControlSynth probes; zeros when absent.
    pub input: Option<Vec<f64>>,
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection {
            certificate: None,
            tol: crate::stability::DEFAULT_TOL,
            probes: 100,
            probe_horizon: 1.0,
            probe_box: 2.0,
            region_grid: 41,
            input: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputSection {
    pub root: PathBuf,
    /// Run directory under the root; defaults to the subcommand name.
    pub name: Option<String>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            root: PathBuf::from("runs"),
            name: None,
        }
    }
}

impl OutputSection {
    /// `$FMLAB_OUTPUT_ROOT` (or `root`) joined with the run name.
    pub fn run_dir(&self, default_name: &str) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| self.root.clone());
        root.join(self.name.as_deref().unwrap_or(default_name))
    }
}

impl Config {
    /// Parse TOML text, failing with every unknown key listed.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let cfg: Config = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.target().validate()?;
        if self.dataset.eval_samples == 0 || self.dataset.eval_pairs == 0 {
            return Err(Error::Config("eval_samples and eval_pairs must be >= 1".into()));
        }
        if self.field.dim != 2 {
            return Err(Error::Config(format!(
                "field.dim must match the 2-D datasets, got {}",
                self.field.dim
            )));
        }
        self.field.mlp_config().validate()?;
        self.field.controlsynth_config().validate()?;
        self.solver.validate()?;
        self.train.validate()?;
        self.finetune.validate(self.field.dim)?;
        let s = &self.stability;
        if !(s.tol >= 0.0) || s.probes == 0 || !(s.probe_horizon > 0.0) || !(s.probe_box > 0.0) || s.region_grid < 2 {
            return Err(Error::Config(
                "stability needs tol >= 0, probes >= 1, probe_horizon > 0, probe_box > 0, region_grid >= 2".into(),
            ));
        }
        if let Some(u) = &s.input {
            if u.len() != self.field.dim {
                return Err(Error::dim("stability.input", self.field.dim, u.len()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::Method;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(Config::from_toml("").unwrap(), Config::default());
    }

    #[test]
    fn sections_parse() {
        let cfg = Config::from_toml(
            r#"
            [dataset]
            name = "eight_gaussians"
            noise_scale = 0.0
            [field]
            kind = "controlsynth"
            blocks = [{ width = 4, kind = "leaky_relu", slope = 0.2 }]
            [solver]
            method = "dopri5"
            rtol = 1e-6
            [train]
            steps = 10
            [finetune]
            sigma = [1.0, 4.0]
            horizon = 0.25
            "#,
        )
        .unwrap();
        assert_eq!(cfg.dataset.name, DatasetName::EightGaussians);
        assert_eq!(cfg.field.blocks[0].activation, Activation::LeakyRelu { slope: 0.2 });
        assert_eq!(cfg.solver.method, Method::Dopri5);
        assert_eq!(cfg.solver.rtol, 1e-6);
        assert_eq!(cfg.train.steps, 10);
        assert_eq!(cfg.finetune.horizon, 0.25);
    }

    #[test]
    fn unknown_keys_listed_together() {
        let err = Config::from_toml("[train]\nstpes = 3\n[bogus]\nx = 1\n[solver]\nmethd = 'euler'\n").unwrap_err();
        let msg = err.to_string();
        for key in ["train.stpes", "bogus", "solver.methd"] {
            assert!(msg.contains(key), "{msg}");
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(Config::from_toml("[train]\nlr = -1.0\n").is_err());
        assert!(Config::from_toml("[dataset]\nname = 'mnist'\n").is_err());
        assert!(Config::from_toml("[field]\ndim = 3\n").is_err());
    }

    #[test]
    fn output_dir_uses_name() {
        let o = OutputSection {
            root: PathBuf::from("/tmp/r"),
            name: Some("exp".into()),
        };
        if std::env::var_os(OUTPUT_ROOT_ENV).is_none() {
            assert_eq!(o.run_dir("pretrain"), PathBuf::from("/tmp/r/exp"));
        }
    }
}
