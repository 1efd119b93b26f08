//! Experiment configuration: a layered TOML document with one table per
//! concern, dotted `key=value` overrides and a stable content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::PartitionSpec;
use crate::losses::{LossWeights, MfaPartner};
use crate::model::ModelConfig;
use crate::protocol::{ProtocolConfig, Strategy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid value for `{key}`: {reason}")]
    Invalid { key: String, reason: String },
    #[error("bad override `{0}`: expected key=value")]
    Override(String),
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, ConfigError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub separation: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            num_classes: 10,
            per_class: 200,
            dim: 32,
            separation: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub num_clients: usize,
    pub beta: f64,
    pub min_samples: usize,
    /// Fixes data and partition across run seeds; when absent both follow the run seed.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            num_clients: 10,
            beta: 0.5,
            min_samples: 10,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden: vec![64],
            feature_dim: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub rounds: usize,
    pub local_epochs: usize,
    pub cross_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub client_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            rounds: 40,
            local_epochs: 3,
            cross_epochs: 3,
            lr: 0.01,
            weight_decay: 1e-5,
            batch_size: 32,
            client_fraction: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossTrainSection {
    pub strategy: Strategy,
    #[serde(alias = "N_e")]
    pub exchange_iterations: usize,
    pub lambda_fuse: f64,
    pub lambda_hy: f64,
    pub lambda_mix: f64,
    pub kappa: f64,
    pub eta: f64,
    pub tau2: f64,
    pub mfa_partner: MfaPartner,
    pub refresh_prototypes_per_exchange: bool,
}

impl Default for CrossTrainSection {
    fn default() -> Self {
        let w = LossWeights::default();
        CrossTrainSection {
            strategy: Strategy::Consistency,
            exchange_iterations: 1,
            lambda_fuse: w.lambda_fuse,
            lambda_hy: w.lambda_hy,
            lambda_mix: w.lambda_mix,
            kappa: w.kappa,
            eta: w.eta,
            tau2: w.tau2,
            mfa_partner: MfaPartner::Sample,
            refresh_prototypes_per_exchange: false,
        }
    }
}

impl CrossTrainSection {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            kappa: self.kappa,
            eta: self.eta,
            tau2: self.tau2,
            lambda_hy: self.lambda_hy,
            lambda_mix: self.lambda_mix,
            lambda_fuse: self.lambda_fuse,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub master_seed: u64,
    pub output_dir: PathBuf,
    /// Save a server checkpoint every this many rounds; 0 disables.
    pub checkpoint_every: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            master_seed: 0,
            output_dir: PathBuf::from("runs"),
            checkpoint_every: 10,
            target_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub fedct: CrossTrainSection,
    pub run: RunSection,
}

fn invalid(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn at_least(key: &str, value: usize, min: usize) -> Result<()> {
    if value < min {
        return Err(invalid(key, format!("must be >= {min}, got {value}")));
    }
    Ok(())
}

fn positive(key: &str, value: f64) -> Result<()> {
    if !(value.is_finite() && value > 0.0) {
        return Err(invalid(key, format!("must be finite and > 0, got {value}")));
    }
    Ok(())
}

fn unit_interval(key: &str, value: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&value) {
        return Err(invalid(key, format!("must lie in [0, 1], got {value}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        at_least("data.num_classes", d.num_classes, 2)?;
        at_least("data.per_class", d.per_class, 2)?;
        at_least("data.dim", d.dim, 1)?;
        positive("data.separation", d.separation)?;

        let p = &self.partition;
        at_least("partition.num_clients", p.num_clients, 2)?;
        positive("partition.beta", p.beta)?;
        at_least("partition.min_samples", p.min_samples, 1)?;
        if p.min_samples * p.num_clients > d.num_classes * d.per_class {
            return Err(invalid(
                "partition.min_samples",
                format!(
                    "{} clients x {} samples exceeds the {} samples generated",
                    p.num_clients,
                    p.min_samples,
                    d.num_classes * d.per_class
                ),
            ));
        }

        if let Some(w) = self.model.hidden.iter().position(|&w| w == 0) {
            return Err(invalid(
                &format!("model.hidden[{w}]"),
                "widths must be >= 1",
            ));
        }
        at_least("model.feature_dim", self.model.feature_dim, 1)?;

        let t = &self.train;
        at_least("train.rounds", t.rounds, 1)?;
        at_least("train.local_epochs", t.local_epochs, 1)?;
        at_least("train.cross_epochs", t.cross_epochs, 1)?;
        positive("train.lr", t.lr)?;
        if !(t.weight_decay.is_finite() && t.weight_decay >= 0.0) {
            return Err(invalid(
                "train.weight_decay",
                format!("must be >= 0, got {}", t.weight_decay),
            ));
        }
        at_least("train.batch_size", t.batch_size, 1)?;
        if !(t.client_fraction > 0.0 && t.client_fraction <= 1.0) {
            return Err(invalid(
                "train.client_fraction",
                format!("must lie in (0, 1], got {}", t.client_fraction),
            ));
        }

        let f = &self.fedct;
        at_least("fedct.exchange_iterations", f.exchange_iterations, 1)?;
        for (key, v) in [
            ("fedct.lambda_fuse", f.lambda_fuse),
            ("fedct.lambda_hy", f.lambda_hy),
            ("fedct.lambda_mix", f.lambda_mix),
        ] {
            unit_interval(key, v)?;
        }
        for (key, v) in [("fedct.kappa", f.kappa), ("fedct.eta", f.eta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(invalid(key, format!("must be >= 0, got {v}")));
            }
        }
        positive("fedct.tau2", f.tau2)?;
        f.loss_weights()
            .validate()
            .map_err(|r| invalid("fedct", r))?;

        if let Some(a) = self.run.target_accuracy {
            unit_interval("run.target_accuracy", a)?;
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            input_dim: self.data.dim,
            hidden: self.model.hidden.clone(),
            feature_dim: self.model.feature_dim,
            num_classes: self.data.num_classes,
        }
    }

    pub fn protocol_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            local_epochs: self.train.local_epochs,
            cross_epochs: self.train.cross_epochs,
            learning_rate: self.train.lr,
            weight_decay: self.train.weight_decay,
            batch_size: self.train.batch_size,
            client_fraction: self.train.client_fraction,
            strategy: self.fedct.strategy,
            exchange_iterations: self.fedct.exchange_iterations,
            weights: self.fedct.loss_weights(),
            mfa_partner: self.fedct.mfa_partner,
            refresh_prototypes_per_exchange: self.fedct.refresh_prototypes_per_exchange,
        }
    }

    /// Seed for data generation and partitioning in the run driven by `run_seed`.
    pub fn data_seed(&self, run_seed: u64) -> u64 {
        self.partition.seed.unwrap_or(run_seed)
    }

    pub fn partition_spec(&self, run_seed: u64) -> PartitionSpec {
        PartitionSpec {
            num_clients: self.partition.num_clients,
            beta: self.partition.beta,
            seed: self.data_seed(run_seed),
            min_samples_per_client: self.partition.min_samples,
        }
    }

    /// The canonical TOML form written as `config.resolved`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// First 16 hex digits of SHA-256 over the canonical form, with the
    /// output directory left out so relocating a sweep keeps its hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.output_dir = PathBuf::new();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Parses, applies overrides in order, and validates.
    pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_overrides(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse_with_overrides(&text, overrides)
    }

    /// Returns a copy with one more override applied and validated.
    pub fn with_override(&self, assignment: &str) -> Result<Self> {
        let mut doc = toml::Table::try_from(self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        apply_override(&mut doc, assignment)?;
        let cfg: ExperimentConfig = doc
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sets `a.b.c = value` in `doc`. The value is read as a TOML literal and
/// falls back to a plain string, so `fedct.strategy=random` needs no quotes.
fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("key is nonempty");
    let mut table = doc;
    for (depth, part) in path.iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| invalid(&parts[..=depth].join("."), "is a value, not a table"))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = ExperimentConfig::parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train.rounds, 40);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.partition.num_clients, 10);
        assert_eq!(cfg.partition.beta, 0.5);
        assert_eq!(cfg.fedct.exchange_iterations, 1);
    }

    #[test]
    fn range_and_key_errors_name_the_key() {
        let err = ExperimentConfig::parse("[partition]\nbeta = -1.0\n").unwrap_err();
        assert!(
            matches!(&err, ConfigError::Invalid { key, .. } if key == "partition.beta"),
            "{err}"
        );
        let err = ExperimentConfig::parse("[train]\nepochz = 3\n").unwrap_err();
        assert!(err.to_string().contains("epochz"), "{err}");
        let err = ExperimentConfig::parse("[train]\nrounds = \"many\"\n").unwrap_err();
        assert!(err.to_string().contains("rounds"), "{err}");
        assert!(ExperimentConfig::parse("[fedct]\nlambda_fuse = 1.5\n").is_err());
        assert!(ExperimentConfig::parse("[bogus]\nx = 1\n").is_err());
    }

    #[test]
    fn round_trip_through_resolved_form() {
        let cfg = ExperimentConfig::parse_with_overrides(
            "",
            &[
                "fedct.strategy=random".into(),
                "partition.seed=7".into(),
                "run.target_accuracy=0.6".into(),
            ],
        )
        .unwrap();
        let again = ExperimentConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
    }

    #[test]
    fn hash_ignores_field_order_and_output_dir() {
        let a =
            ExperimentConfig::parse("[train]\nlr = 0.05\nrounds = 3\n[data]\ndim = 8\n").unwrap();
        let b =
            ExperimentConfig::parse("[data]\ndim = 8\n[train]\nrounds = 3\nlr = 0.05\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = a.with_override("run.output_dir=\"elsewhere\"").unwrap();
        assert_eq!(a.hash(), c.hash());
        let d = a.with_override("train.rounds=4").unwrap();
        assert_ne!(a.hash(), d.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn overrides_accept_bare_strings_and_alias() {
        let cfg = ExperimentConfig::parse_with_overrides(
            "[fedct]\nN_e = 2\n",
            &[
                "fedct.strategy=inconsistency".into(),
                "model.hidden=[8, 8]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.fedct.exchange_iterations, 2);
        assert_eq!(cfg.fedct.strategy, Strategy::Inconsistency);
        assert_eq!(cfg.model.hidden, vec![8, 8]);
        assert!(matches!(
            ExperimentConfig::parse_with_overrides("", &["novalue".into()]),
            Err(ConfigError::Override(_))
        ));
        assert!(ExperimentConfig::parse_with_overrides("", &["train.rounds.x=1".into()]).is_err());
    }
}
