use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use twinseg_tensor::AdamConfig;

use crate::data::{AugmentConfig, CohortSpec};
use crate::error::{Error, Result};
use crate::fed::{DtInit, DtSchedule, Execution, ParticipationPolicy, TrainOptions};
use crate::model::{LossMode, ModelConfig};

pub const PRESETS: [&str; 4] = ["desk", "ci", "noniid", "paper"];

/// Fully resolved experiment description. Every run artefact is a function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub cohort: CohortSpec,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossMode,
    /// Fraction of clients drawn each round; 1.0 means everyone.
    pub participation: f64,
    pub dt_epochs: usize,
    pub dt_schedule: DtSchedule,
    pub dt_init: DtInit,
    pub augment: AugmentConfig,
    pub execution: Execution,
    /// Maximum points per ROC curve in the reports.
    pub roc_points: usize,
    /// Excluded from the config hash.
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let desk_model = ModelConfig::desk();
        let (reference, _) = CohortSpec::reference(1.0 / 25.0, 40, 0.05);
        let base = ExperimentConfig {
            preset: name.to_string(),
            seed: 7,
            model: desk_model,
            cohort: reference,
            rounds: 10,
            local_epochs: 5,
            batch_size: 2,
            learning_rate: 1e-3,
            loss: LossMode::DiceCe,
            participation: 1.0,
            dt_epochs: 1,
            dt_schedule: DtSchedule::Final,
            dt_init: DtInit::Global,
            augment: AugmentConfig::default(),
            execution: Execution::Serial,
            roc_points: 101,
            output_dir: PathBuf::from(format!("runs/{name}")),
        };
        match name {
            "desk" => Ok(base),
            "ci" => Ok(ExperimentConfig {
                local_epochs: 2,
                ..base
            }),
            "noniid" => Ok(ExperimentConfig {
                local_epochs: 2,
                rounds: 5,
                cohort: CohortSpec::reference(1.0 / 25.0, 40, 0.25).0,
                ..base
            }),
            "paper" => Ok(ExperimentConfig {
                model: ModelConfig::paper(),
                learning_rate: 1e-4,
                cohort: CohortSpec::reference(1.0 / 25.0, 160, 0.05).0,
                ..base
            }),
            other => Err(Error::config(
                "preset",
                format!("unknown preset `{other}` (expected one of {PRESETS:?})"),
            )),
        }
    }

    /// Reads a TOML file: `preset` (default `desk`) supplies every field and
    /// the remaining keys override it, tables merging recursively.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let user: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.to_string()))?;
        let preset_name = match user.get("preset") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s.clone(),
            Some(other) => {
                return Err(Error::config("preset", format!("expected a string, got {other}")))
            }
        };
        let preset = ExperimentConfig::preset(&preset_name)?;
        let mut merged = toml::Table::try_from(&preset)
            .map_err(|e| Error::config("<preset>", e.to_string()))?;
        merge(&mut merged, user);
        let deserializer = toml::Value::Table(merged);
        let config: ExperimentConfig = serde_path_to_error::deserialize(deserializer)
            .map_err(|e| Error::config(e.path().to_string(), e.inner().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_toml_str(&text)
    }

    /// Checks every constraint, naming the offending field.
    pub fn validate(&self) -> Result<()> {
        if !PRESETS.contains(&self.preset.as_str()) {
            return Err(Error::config("preset", format!("unknown preset `{}`", self.preset)));
        }
        for (path, value) in [
            ("rounds", self.rounds),
            ("local_epochs", self.local_epochs),
            ("batch_size", self.batch_size),
            ("dt_epochs", self.dt_epochs),
            ("roc_points", self.roc_points),
        ] {
            if value == 0 {
                return Err(Error::config(path, "must be at least 1"));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("participation", "must lie in (0, 1]"));
        }
        self.model
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;
        if self.model.num_classes != crate::data::NUM_CLASSES
            || self.model.in_modalities != crate::data::MODALITIES.len()
        {
            return Err(Error::config(
                "model",
                "the synthetic cohort provides 4 modalities and 4 classes",
            ));
        }
        if self.cohort.raw_extent < 2 {
            return Err(Error::config("cohort.raw_extent", "must be at least 2"));
        }
        if self.cohort.clients.is_empty() {
            return Err(Error::config("cohort.clients", "at least one client is required"));
        }
        for (i, c) in self.cohort.clients.iter().enumerate() {
            let at = |field: &str| format!("cohort.clients[{i}].{field}");
            if c.sample_count == 0 {
                return Err(Error::config(at("sample_count"), "must be positive"));
            }
            if c.prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::config(at("prevalence"), "entries must lie in [0, 1]"));
            }
            if !(c.noise >= 0.0 && c.noise.is_finite()) {
                return Err(Error::config(at("noise"), "must be non-negative"));
            }
            if !(c.radius >= 0.0) || 2.0 * (1.2 * c.radius + 1.0) > self.cohort.raw_extent as f64 - 1.0 && c.radius > 0.0 {
                return Err(Error::config(
                    at("radius"),
                    format!("{} does not fit raw_extent {}", c.radius, self.cohort.raw_extent),
                ));
            }
        }
        let [lo, hi] = self.augment.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config("augment.scale_range", "needs 0 < low <= high"));
        }
        Ok(())
    }

    /// SHA-256 of the resolved configuration, output directory excluded.
    pub fn hash(&self) -> String {
        let canonical = ExperimentConfig {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.local_epochs,
            batch_size: self.batch_size,
            adam: AdamConfig {
                lr: self.learning_rate,
                ..AdamConfig::default()
            },
            loss: self.loss,
            augment: self.augment.clone(),
        }
    }

    pub fn participation_policy(&self) -> ParticipationPolicy {
        if self.participation >= 1.0 {
            ParticipationPolicy::Full
        } else {
            ParticipationPolicy::Fraction {
                fraction: self.participation,
                seed: self.seed,
            }
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}
