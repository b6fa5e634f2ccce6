//! Versioned JSON checkpoints.
//!
//! The content hash covers only the model payload (kind, config, shapes,
//! parameter values), so bookkeeping fields such as the training step do not
//! change it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::fields::{ControlSynthConfig, ControlSynthField, MlpConfig, MlpField, Trainable, VectorField};
use crate::linalg::Mat;
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Links a residual checkpoint to the frozen field it was trained on top of.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualInfo {
    pub base_hash: String,
    pub horizon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub field_kind: String,
    pub field_config: serde_json::Value,
    pub shapes: Vec<ParamShape>,
    /// Row-major values, one array per entry of `shapes`.
    pub params: Vec<Vec<f64>>,
    pub rng_seed: u64,
    pub training_step: usize,
    #[serde(default)]
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual: Option<ResidualInfo>,
}

#[derive(Serialize)]
struct Payload<'a> {
    format_version: u32,
    field_kind: &'a str,
    field_config: &'a serde_json::Value,
    shapes: &'a [ParamShape],
    params: &'a [Vec<f64>],
}

impl Checkpoint {
    fn from_store(kind: &str, config: serde_json::Value, store: &ParamStore, rng_seed: u64, step: usize) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            field_kind: kind.to_string(),
            field_config: config,
            shapes: store
                .iter()
                .map(|p| ParamShape {
                    name: p.name.clone(),
                    rows: p.value.rows(),
                    cols: p.value.cols(),
                })
                .collect(),
            params: store.iter().map(|p| p.value.data().to_vec()).collect(),
            rng_seed,
            training_step: step,
            tag: String::new(),
            residual: None,
        }
    }

    pub fn from_mlp(field: &MlpField, rng_seed: u64, step: usize) -> Self {
        let cfg = serde_json::to_value(field.config()).expect("config serializes");
        Self::from_store("mlp", cfg, field.params(), rng_seed, step)
    }

    pub fn from_controlsynth(field: &ControlSynthField, rng_seed: u64, step: usize) -> Self {
        let cfg = serde_json::to_value(field.config()).expect("config serializes");
        Self::from_store("controlsynth", cfg, field.params(), rng_seed, step)
    }

    pub fn from_field(field: &AnyField, rng_seed: u64, step: usize) -> Self {
        match field {
            AnyField::Mlp(f) => Self::from_mlp(f, rng_seed, step),
            AnyField::ControlSynth(f) => Self::from_controlsynth(f, rng_seed, step),
        }
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    fn store(&self) -> Result<ParamStore> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if self.shapes.len() != self.params.len() {
            return Err(Error::dim("checkpoint parameter arrays", self.shapes.len(), self.params.len()));
        }
        let mut store = ParamStore::new();
        for (s, v) in self.shapes.iter().zip(&self.params) {
            let m = Mat::from_vec(s.rows, s.cols, v.clone())?;
            store.push(s.name.clone(), m, true);
        }
        Ok(store)
    }

    pub fn to_field(&self) -> Result<AnyField> {
        let store = self.store()?;
        match self.field_kind.as_str() {
            "mlp" => {
                let cfg: MlpConfig = serde_json::from_value(self.field_config.clone())?;
                Ok(AnyField::Mlp(MlpField::from_params(cfg, store)?))
            }
            "controlsynth" => {
                let cfg: ControlSynthConfig = serde_json::from_value(self.field_config.clone())?;
                Ok(AnyField::ControlSynth(ControlSynthField::from_params(cfg, store)?))
            }
            other => Err(Error::Config(format!("unknown field_kind {other:?} in checkpoint"))),
        }
    }

    pub fn to_mlp(&self) -> Result<MlpField> {
        match self.to_field()? {
            AnyField::Mlp(f) => Ok(f),
            AnyField::ControlSynth(_) => Err(Error::Config("expected an mlp checkpoint".into())),
        }
    }

    pub fn to_controlsynth(&self) -> Result<ControlSynthField> {
        match self.to_field()? {
            AnyField::ControlSynth(f) => Ok(f),
            AnyField::Mlp(_) => Err(Error::Config("expected a controlsynth checkpoint".into())),
        }
    }

    /// SHA-256 of the canonical model payload, lowercase hex.
    pub fn content_hash(&self) -> String {
        let payload = Payload {
            format_version: self.format_version,
            field_kind: &self.field_kind,
            field_config: &self.field_config,
            shapes: &self.shapes,
            params: &self.params,
        };
        let bytes = serde_json::to_vec(&payload).expect("payload serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.params.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameter values in {}", path.display())));
        }
        Ok(ck)
    }
}

/// Any field kind that can be stored in a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyField {
    Mlp(MlpField),
    ControlSynth(ControlSynthField),
}

impl AnyField {
    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            AnyField::Mlp(f) => f.params_mut(),
            AnyField::ControlSynth(f) => f.params_mut(),
        }
    }
}

impl Trainable for MlpField {
    fn params_mut(&mut self) -> &mut ParamStore {
        MlpField::params_mut(self)
    }

    fn checkpoint(&self, rng_seed: u64, step: usize) -> Checkpoint {
        Checkpoint::from_mlp(self, rng_seed, step)
    }
}

impl Trainable for ControlSynthField {
    fn params_mut(&mut self) -> &mut ParamStore {
        ControlSynthField::params_mut(self)
    }

    fn checkpoint(&self, rng_seed: u64, step: usize) -> Checkpoint {
        Checkpoint::from_controlsynth(self, rng_seed, step)
    }
}

impl Trainable for AnyField {
    fn params_mut(&mut self) -> &mut ParamStore {
        AnyField::params_mut(self)
    }

    fn checkpoint(&self, rng_seed: u64, step: usize) -> Checkpoint {
        Checkpoint::from_field(self, rng_seed, step)
    }
}

impl VectorField for AnyField {
    fn dim(&self) -> usize {
        match self {
            AnyField::Mlp(f) => f.dim(),
            AnyField::ControlSynth(f) => f.dim(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            AnyField::Mlp(f) => f.kind(),
            AnyField::ControlSynth(f) => f.kind(),
        }
    }

    fn params(&self) -> &ParamStore {
        match self {
            AnyField::Mlp(f) => f.params(),
            AnyField::ControlSynth(f) => f.params(),
        }
    }

    fn forward<'a>(&'a self, g: &mut Graph<'a>, params: &[NodeId], t: &[f64], x: NodeId) -> NodeId {
        match self {
            AnyField::Mlp(f) => f.forward(g, params, t, x),
            AnyField::ControlSynth(f) => f.forward(g, params, t, x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_preserves_hash_and_values() {
        let f = MlpField::new(MlpConfig::default(), &mut Rng::new(3)).unwrap();
        let ck = Checkpoint::from_mlp(&f, 3, 10).with_tag("pretrained");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.content_hash(), ck.content_hash());
        assert_eq!(back.to_mlp().unwrap(), f);
    }

    #[test]
    fn hash_ignores_bookkeeping() {
        let f = MlpField::zeros(MlpConfig::default()).unwrap();
        let a = Checkpoint::from_mlp(&f, 1, 0);
        let b = Checkpoint::from_mlp(&f, 2, 500).with_tag("x");
        assert_eq!(a.content_hash(), b.content_hash());
        assert_eq!(a.content_hash().len(), 64);
    }

    #[test]
    fn hash_sees_parameter_changes() {
        let mut f = MlpField::zeros(MlpConfig::default()).unwrap();
        let a = Checkpoint::from_mlp(&f, 1, 0).content_hash();
        f.params_mut().set(1, Mat::filled(1, 64, 1e-12)).unwrap();
        assert_ne!(a, Checkpoint::from_mlp(&f, 1, 0).content_hash());
    }

    #[test]
    fn bad_checkpoints_rejected() {
        let f = MlpField::zeros(MlpConfig::default()).unwrap();
        let mut ck = Checkpoint::from_mlp(&f, 1, 0);
        ck.format_version = 99;
        assert!(ck.to_field().is_err());
        let mut ck = Checkpoint::from_mlp(&f, 1, 0);
        ck.params.pop();
        assert!(ck.to_field().is_err());
        let mut ck = Checkpoint::from_mlp(&f, 1, 0);
        ck.field_kind = "unet".into();
        assert!(ck.to_field().is_err());
        assert!(matches!(Checkpoint::load("/nonexistent/ck.json"), Err(Error::Io { .. })));
    }
}
