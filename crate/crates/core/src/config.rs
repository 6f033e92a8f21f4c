//! Flat TOML experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackConfig, Distance};
use crate::data::{load_mnist_dir, synthetic_gaussian, DataError, DatasetShard, SyntheticSpec, MNIST_CLASSES};
use crate::engine::{RoundConfig, Scheme, TrainingParams};
use crate::model::param_count;
use crate::privacy::{PrivacyError, PrivacyParams, SignResetMode};

const MNIST_FEATURES: usize = 28 * 28;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid override `{0}`: expected key=value")]
    Override(String),
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl From<PrivacyError> for ConfigError {
    fn from(e: PrivacyError) -> Self {
        match e {
            PrivacyError::InvalidParam { key, message } => ConfigError::Invalid { key: key.to_string(), message },
            other => ConfigError::Invalid { key: "privacy".into(), message: other.to_string() },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub rounds: u64,
    /// End devices under the single edge.
    pub clients: usize,
    pub scheme: Scheme,

    pub gamma: f64,
    pub epsilon: f64,
    pub delta: f64,
    pub t: u32,
    pub beta: f64,
    pub clip: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
    pub sign_reset_mode: SignResetMode,

    pub eta: f64,
    pub decay: f64,
    pub batch_size: usize,
    pub local_steps: usize,
    pub hidden: Vec<usize>,

    pub dataset: DatasetKind,
    pub mnist_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_limit: Option<usize>,
    pub synthetic_classes: usize,
    pub synthetic_features: usize,
    pub synthetic_train_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_separation: f64,
    pub classes_per_client: usize,

    pub master_seed: u64,

    pub attack: bool,
    pub attack_targets: usize,
    pub attack_steps: usize,
    pub attack_step_size: f64,
    pub attack_distance: Distance,

    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let privacy = PrivacyParams::default();
        let training = TrainingParams::default();
        let attack = AttackConfig::default();
        Self {
            rounds: 30,
            clients: 10,
            scheme: Scheme::PaImfl,
            gamma: privacy.gamma,
            epsilon: privacy.epsilon,
            delta: privacy.delta,
            t: privacy.t,
            beta: privacy.beta,
            clip: privacy.clip,
            sensitivity: None,
            sign_reset_mode: privacy.sign_reset_mode,
            eta: training.eta,
            decay: training.decay,
            batch_size: training.batch_size,
            local_steps: training.local_steps,
            hidden: vec![64],
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            train_limit: None,
            test_limit: None,
            synthetic_classes: 10,
            synthetic_features: 20,
            synthetic_train_per_class: 200,
            synthetic_test_per_class: 50,
            synthetic_separation: 5.0,
            classes_per_client: 2,
            master_seed: 0,
            attack: false,
            attack_targets: 50,
            attack_steps: attack.optimizer_steps,
            attack_step_size: attack.step_size,
            attack_distance: attack.distance,
            output_dir: PathBuf::from("results"),
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), message: message.into() }
}

impl ExperimentConfig {
    pub fn privacy_params(&self) -> PrivacyParams {
        PrivacyParams {
            epsilon: self.epsilon,
            sensitivity_override: self.sensitivity,
            delta: self.delta,
            gamma: self.gamma,
            t: self.t,
            clip: self.clip,
            beta: self.beta,
            sign_reset_mode: self.sign_reset_mode,
        }
    }

    pub fn training_params(&self) -> TrainingParams {
        TrainingParams {
            eta: self.eta,
            decay: self.decay,
            batch_size: self.batch_size,
            local_steps: self.local_steps,
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig { scheme: self.scheme, privacy: self.privacy_params(), training: self.training_params() }
    }

    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            optimizer_steps: self.attack_steps,
            step_size: self.attack_step_size,
            distance: self.attack_distance,
            ..AttackConfig::default()
        }
    }

    /// (feature_dim, classes) of the configured dataset.
    pub fn data_shape(&self) -> (usize, usize) {
        match self.dataset {
            DatasetKind::Mnist => (MNIST_FEATURES, MNIST_CLASSES),
            DatasetKind::Synthetic => (self.synthetic_features, self.synthetic_classes),
        }
    }

    pub fn layer_dims_for(&self, feature_dim: usize, classes: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(feature_dim);
        dims.extend(&self.hidden);
        dims.push(classes);
        dims
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let (f, c) = self.data_shape();
        self.layer_dims_for(f, c)
    }

    /// Every constraint, including `δ < 1/(10·d)` for the configured model.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let privacy = self.privacy_params();
        privacy.validate()?;
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(invalid("eta", format!("eta must be finite and ≥ 0, got {}", self.eta)));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(invalid("decay", format!("decay must be finite and ≥ 0, got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "batch_size must be ≥ 1"));
        }
        if self.local_steps == 0 {
            return Err(invalid("local_steps", "local_steps must be ≥ 1"));
        }
        if self.hidden.contains(&0) {
            return Err(invalid("hidden", "hidden layer widths must be ≥ 1"));
        }
        if self.dataset == DatasetKind::Synthetic {
            for (key, v) in [
                ("synthetic_classes", self.synthetic_classes),
                ("synthetic_features", self.synthetic_features),
                ("synthetic_train_per_class", self.synthetic_train_per_class),
            ] {
                if v == 0 {
                    return Err(invalid(key, format!("{key} must be ≥ 1")));
                }
            }
            if !(self.synthetic_separation >= 0.0 && self.synthetic_separation.is_finite()) {
                return Err(invalid("synthetic_separation", "synthetic_separation must be finite and ≥ 0"));
            }
        }
        let (_, classes) = self.data_shape();
        if self.classes_per_client == 0 || self.classes_per_client > classes {
            return Err(invalid(
                "classes_per_client",
                format!("classes_per_client ∈ [1,{classes}] required, got {}", self.classes_per_client),
            ));
        }
        if self.master_seed > i64::MAX as u64 {
            return Err(invalid("master_seed", "master_seed must fit in a signed 64-bit integer"));
        }
        if !(self.attack_step_size > 0.0 && self.attack_step_size.is_finite()) {
            return Err(invalid("attack_step_size", "attack_step_size must be positive and finite"));
        }
        if self.attack && self.attack_targets == 0 {
            return Err(invalid("attack_targets", "attack_targets must be ≥ 1"));
        }
        privacy.validate_for_dim(param_count(&self.layer_dims()))?;
        Ok(())
    }

    /// Loads (train, test) for the configured dataset.
    pub fn load_datasets(&self) -> Result<(DatasetShard, DatasetShard), DataError> {
        let (train, test) = match self.dataset {
            DatasetKind::Mnist => load_mnist_dir(&self.mnist_dir)?,
            DatasetKind::Synthetic => {
                let all = synthetic_gaussian(SyntheticSpec {
                    classes: self.synthetic_classes,
                    per_class: self.synthetic_train_per_class + self.synthetic_test_per_class,
                    feature_dim: self.synthetic_features,
                    separation: self.synthetic_separation,
                    seed: self.master_seed,
                })?;
                all.split_per_class(self.synthetic_test_per_class)
            }
        };
        let train = match self.train_limit {
            Some(n) => train.truncate(n),
            None => train,
        };
        let test = match self.test_limit {
            Some(n) => test.truncate(n),
            None => test,
        };
        Ok((train, test))
    }

    /// The manifest form: every field, resolved.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config fields are all TOML-representable")
    }
}

/// Parses and validates TOML text, applying `key=value` overrides first.
/// Override values are read as TOML literals and fall back to bare strings.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    for item in overrides {
        let (key, value) = item.split_once('=').ok_or_else(|| ConfigError::Override(item.clone()))?;
        let key = key.trim();
        let value = value.trim();
        if key.is_empty() {
            return Err(ConfigError::Override(item.clone()));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        table.insert(key.to_string(), parsed);
    }
    let config: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_config_str(&text, overrides)
}
