//! Experiment configuration: one TOML file, `section.key=value` overrides on
//! top, defaults underneath.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::model::NetworkConfig;
use crate::quant::{QuantSpec, MIN_CALIBRATION_SAMPLES};
use crate::sim::{InjectionSchedule, PlacementConfig, ScheduleKind, StepCostModel};
use crate::train::TrainConfig;

/// Injection schedule as written in a config file. A missing period means
/// one token per time step (pipelined) or one per network depth (fall-through).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub period: Option<usize>,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self { kind: ScheduleKind::FallThrough, period: None }
    }
}

impl ScheduleSpec {
    pub fn resolve(&self, depth: usize) -> InjectionSchedule {
        let base = InjectionSchedule::for_depth(self.kind, depth);
        InjectionSchedule { period: self.period.unwrap_or(base.period), ..base }
    }
}

/// Sample budgets for the slower evaluation paths.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Test samples run token by token (float streaming and integer engine; `None` = all).
    pub stream_samples: Option<usize>,
    /// Test samples run through the neurocore simulator.
    pub simulate_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { stream_samples: None, simulate_samples: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Network initialization, shuffling and fine-tuning all derive from this.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: NetworkConfig,
    pub train: TrainConfig,
    pub qaft: TrainConfig,
    pub quant: QuantSpec,
    /// Training samples used to calibrate activation bounds.
    pub calibration_samples: usize,
    pub eval: EvalConfig,
    pub cost: StepCostModel,
    pub schedule: ScheduleSpec,
    pub placement: PlacementConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::default(),
            model: NetworkConfig::default(),
            train: TrainConfig::default(),
            qaft: TrainConfig { epochs: 1, learning_rate: 1e-5, ssm_lr_factor: 0.1, cosine_decay: false, ..TrainConfig::default() },
            quant: QuantSpec::default(),
            calibration_samples: MIN_CALIBRATION_SAMPLES,
            eval: EvalConfig::default(),
            cost: StepCostModel::default(),
            schedule: ScheduleSpec::default(),
            placement: PlacementConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Pipeline stage whose inputs a checkpoint hash covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Train,
    Ptq,
    Qaft,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to a TOML tree. Values parse as TOML literals and
/// fall back to bare strings.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key `{path}`")));
    }
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Defaults, then `text`, then `overrides`. Partial sections keep the
    /// defaults of this config (so `[qaft]` falls back to the fine-tuning
    /// defaults, not the training ones).
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut root = toml::Table::try_from(Self::default()).expect("default config serializes");
        merge(&mut root, user);
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.qaft.validate()?;
        self.quant.validate()?;
        self.cost.validate()?;
        let name = self.dataset.name;
        if self.model.input_dim != name.input_dim() {
            return Err(Error::Config(format!(
                "model.input_dim = {} but {name:?} has {} channels per token",
                self.model.input_dim,
                name.input_dim()
            )));
        }
        if self.model.seq_len != name.seq_len() {
            return Err(Error::Config(format!("model.seq_len = {} but {name:?} sequences have {} tokens", self.model.seq_len, name.seq_len())));
        }
        if self.model.num_classes != 10 {
            return Err(Error::Config(format!("model.num_classes = {} but the datasets have 10 classes", self.model.num_classes)));
        }
        if self.quant.weight_bits > self.quant.spike_bits {
            return Err(Error::Config("quant.weight_bits exceeds quant.spike_bits".into()));
        }
        if self.calibration_samples < MIN_CALIBRATION_SAMPLES {
            return Err(Error::Config(format!("calibration_samples must be at least {MIN_CALIBRATION_SAMPLES}")));
        }
        if self.schedule.period == Some(0) {
            return Err(Error::Config("schedule.period must be at least 1".into()));
        }
        if self.placement.max_neurons_per_core == 0 || self.placement.target_work_per_core == 0 {
            return Err(Error::Config("placement limits must be positive".into()));
        }
        Ok(())
    }

    /// Training and fine-tuning settings with the experiment seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train.clone() }
    }

    pub fn qaft_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed.wrapping_add(1), ..self.qaft.clone() }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 over the fields that determine the artifact of `stage`.
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut h = Sha256::new();
        let mut feed = |v: serde_json::Value| h.update(v.to_string().as_bytes());
        feed(serde_json::json!({ "seed": self.seed, "dataset": self.dataset, "model": self.model, "train": self.train }));
        if matches!(stage, Stage::Ptq | Stage::Qaft) {
            feed(serde_json::json!({ "quant": self.quant, "calibration_samples": self.calibration_samples }));
        }
        if stage == Stage::Qaft {
            feed(serde_json::json!({ "qaft": self.qaft }));
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 of the whole resolved configuration.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetName;

    #[test]
    fn defaults_are_valid() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn partial_sections_keep_their_own_defaults() {
        let c = ExperimentConfig::from_toml_str("[qaft]\nbatch_size = 16\n", &["qaft.learning_rate=3e-5".into()]).unwrap();
        let d = ExperimentConfig::default().qaft;
        assert_eq!(c.qaft.epochs, d.epochs);
        assert!(!c.qaft.cosine_decay);
        assert_eq!(c.qaft.ssm_lr_factor, d.ssm_lr_factor);
        assert_eq!((c.qaft.batch_size, c.qaft.learning_rate), (16, 3e-5));
    }

    #[test]
    fn file_then_overrides() {
        let text = "seed = 3\n[train]\nepochs = 4\nlearning_rate = 0.01\n";
        let c = ExperimentConfig::from_toml_str(text, &["train.epochs=7".into(), "schedule.kind=pipelined".into()]).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.schedule.kind, ScheduleKind::Pipelined);
        assert_eq!(c.train_config().seed, 3);
    }

    #[test]
    fn cross_field_checks() {
        let bad = ExperimentConfig::from_toml_str("[dataset]\nname = \"scifar\"\n", &[]);
        assert!(matches!(bad, Err(Error::Config(_))));
        let ok = ExperimentConfig::from_toml_str(
            "[dataset]\nname = \"scifar\"\n[model]\ninput_dim = 3\nseq_len = 1024\nmodel_dim = 128\nstate_dim = 64\n",
            &[],
        )
        .unwrap();
        assert_eq!(ok.dataset.name, DatasetName::Scifar);
        assert!(ExperimentConfig::from_toml_str("", &["quant.weight_bits=40".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["calibration_samples=10".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["nonsense=1".into()]).is_err());
        assert!(ExperimentConfig::from_toml_str("", &["train.epochs".into()]).is_err());
    }

    #[test]
    fn round_trip_and_hashes() {
        let c = ExperimentConfig::from_toml_str("", &["train.epochs=2".into()]).unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
        let d = ExperimentConfig::from_toml_str("", &["train.epochs=2".into(), "qaft.epochs=3".into()]).unwrap();
        assert_eq!(c.stage_hash(Stage::Ptq), d.stage_hash(Stage::Ptq));
        assert_ne!(c.stage_hash(Stage::Qaft), d.stage_hash(Stage::Qaft));
        assert_ne!(c.stage_hash(Stage::Train), ExperimentConfig::default().stage_hash(Stage::Train));
    }

    #[test]
    fn schedule_resolution() {
        let s = ScheduleSpec::default().resolve(11);
        assert_eq!(s.period, 11);
        let p = ScheduleSpec { kind: ScheduleKind::Pipelined, period: None }.resolve(11);
        assert_eq!(p.period, 1);
        let custom = ScheduleSpec { kind: ScheduleKind::Pipelined, period: Some(3) }.resolve(11);
        assert_eq!(custom.period, 3);
    }
}
