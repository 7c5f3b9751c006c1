//! Run configuration: TOML with dotted keys, stable serialization, and a
//! content hash for replay manifests. Unknown keys are rejected so typos
//! fail loudly with their key path.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cma::RewardSemantics;
use crate::env::Mode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error("{key}: {msg}")]
    InvalidValue { key: &'static str, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stream derives from it.
    pub seed: u64,
    pub net: NetSection,
    pub data: DataSection,
    pub baseline: BaselineSection,
    pub env: EnvSection,
    pub gat: GatSection,
    pub ppo: PpoSection,
    pub gae: GaeSection,
    pub es: EsSection,
    pub oracle: OracleSection,
    pub prune: PruneSection,
    pub log: LogSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            net: NetSection::default(),
            data: DataSection::default(),
            baseline: BaselineSection::default(),
            env: EnvSection::default(),
            gat: GatSection::default(),
            ppo: PpoSection::default(),
            gae: GaeSection::default(),
            es: EsSection::default(),
            oracle: OracleSection::default(),
            prune: PruneSection::default(),
            log: LogSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetSection {
    /// Built-in architecture: chain | toy_resnet | shortcut | chained_res |
    /// bn_chain | random. Ignored when `path` is set.
    pub name: String,
    pub seed: u64,
    /// Load a network file instead of generating a built-in.
    pub path: Option<String>,
}

impl Default for NetSection {
    fn default() -> Self {
        Self { name: "chain".into(), seed: 7, path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training images generated per class.
    pub per_class: usize,
    /// Validation images generated per class (separate stream).
    pub val_per_class: usize,
    pub seed: u64,
    /// Load a dataset file instead of generating one.
    pub path: Option<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { per_class: 16, val_per_class: 8, seed: 11, path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineSection {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for BaselineSection {
    fn default() -> Self {
        Self { epochs: 8, lr: 2e-3, batch: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    /// resource_constrained | performance_guaranteed.
    pub mode: String,
    pub flops_target_ratio: f64,
    /// Absolute top-1 target for performance-guaranteed mode; when
    /// `acc_target_drop` is set the target is baseline − drop instead.
    pub acc_target: f64,
    pub acc_target_drop: Option<f64>,
    pub n_groups: usize,
    pub ema_beta: f64,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            mode: "resource_constrained".into(),
            flops_target_ratio: 0.5,
            acc_target: 0.8,
            acc_target_drop: None,
            n_groups: 4,
            ema_beta: 0.9,
        }
    }
}

impl EnvSection {
    /// Resolves the mode string; `baseline_acc` feeds `acc_target_drop`.
    pub fn mode_for(&self, baseline_acc: f64) -> Result<Mode, ConfigError> {
        match self.mode.as_str() {
            "resource_constrained" => Ok(Mode::ResourceConstrained {
                flops_target_ratio: self.flops_target_ratio,
            }),
            "performance_guaranteed" => {
                let acc_target = match self.acc_target_drop {
                    Some(drop) => (baseline_acc - drop).max(1e-9),
                    None => self.acc_target,
                };
                Ok(Mode::PerformanceGuaranteed { acc_target })
            }
            other => Err(ConfigError::InvalidValue {
                key: "env.mode",
                msg: format!(
                    "unknown mode {other:?}; expected resource_constrained or performance_guaranteed"
                ),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatSection {
    pub rounds: usize,
    pub hidden: usize,
    pub embed: usize,
    pub leaky_slope: f64,
}

impl Default for GatSection {
    fn default() -> Self {
        Self { rounds: 3, hidden: 128, embed: 128, leaky_slope: 0.2 }
    }
}

impl GatSection {
    pub fn to_gat_config(&self) -> crate::gat::GatConfig {
        crate::gat::GatConfig {
            rounds: self.rounds,
            hidden: self.hidden,
            embed: self.embed,
            leaky_slope: self.leaky_slope,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoSection {
    pub clip_eps: f64,
    pub update_epochs: usize,
    pub minibatch: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    pub episodes_per_update: usize,
    pub head_hidden: usize,
    pub init_prune_prob: f64,
    /// Policy updates to run; total episodes = updates × episodes_per_update.
    pub updates: usize,
}

impl Default for PpoSection {
    fn default() -> Self {
        Self {
            clip_eps: 0.2,
            update_epochs: 4,
            minibatch: 64,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 3e-4,
            episodes_per_update: 16,
            head_hidden: 64,
            init_prune_prob: 0.05,
            updates: 30,
        }
    }
}

impl PpoSection {
    pub fn to_ppo_config(&self) -> crate::ppo::PpoConfig {
        crate::ppo::PpoConfig {
            clip: self.clip_eps,
            update_epochs: self.update_epochs,
            minibatch: self.minibatch,
            entropy_coef: self.entropy_coef,
            value_coef: self.value_coef,
            lr: self.lr,
            episodes_per_update: self.episodes_per_update,
            head_hidden: self.head_hidden,
            init_prune_prob: self.init_prune_prob,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaeSection {
    pub episodes: usize,
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
}

impl Default for GaeSection {
    fn default() -> Self {
        let c = crate::gae::PretrainConfig::default();
        Self { episodes: c.episodes, lr: c.lr, batch: c.batch, steps: c.steps }
    }
}

impl GaeSection {
    pub fn to_pretrain_config(&self) -> crate::gae::PretrainConfig {
        crate::gae::PretrainConfig {
            episodes: self.episodes,
            lr: self.lr,
            batch: self.batch,
            steps: self.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsSection {
    /// 0 selects the dimension-dependent default 4 + ⌊3 ln C⌋.
    pub population: usize,
    pub generations: usize,
    /// corrected | as_paper.
    pub semantics: String,
}

impl Default for EsSection {
    fn default() -> Self {
        Self { population: 0, generations: 60, semantics: "corrected".into() }
    }
}

impl EsSection {
    pub fn semantics(&self) -> Result<RewardSemantics, ConfigError> {
        match self.semantics.as_str() {
            "corrected" => Ok(RewardSemantics::Corrected),
            "as_paper" => Ok(RewardSemantics::AsPaper),
            other => Err(ConfigError::InvalidValue {
                key: "es.semantics",
                msg: format!("unknown semantics {other:?}; expected corrected or as_paper"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// External oracle command; empty uses the built-in evaluator.
    pub command: Vec<String>,
    pub timeout_s: u64,
    /// Built-in evaluator batch size.
    pub batch: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { command: Vec::new(), timeout_s: 30, batch: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneSection {
    /// Stochastic rollouts sampled when extracting the final mask.
    pub samples: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self { samples: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogSection {
    /// Record wall-clock durations; off by default so logs are replayable
    /// byte for byte.
    pub timing: bool,
}

impl Default for LogSection {
    fn default() -> Self {
        Self { timing: false }
    }
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(s)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&s)
    }

    /// Canonical serialization: field order is fixed by the struct layout.
    pub fn to_toml_string(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// SHA-256 of the canonical serialization, hex-encoded.
    pub fn hash(&self) -> Result<String, ConfigError> {
        let canon = self.to_toml_string()?;
        let digest = Sha256::digest(canon.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Replay manifest written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub master_seed: u64,
    pub package_version: String,
    pub command: String,
}

impl RunManifest {
    pub fn new(cfg: &RunConfig, command: &str) -> Result<Self, ConfigError> {
        Ok(Self {
            config_hash: cfg.hash()?,
            master_seed: cfg.seed,
            package_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn dotted_keys_parse() {
        let cfg = RunConfig::from_toml_str(
            "seed = 9\nenv.mode = \"performance_guaranteed\"\nenv.n_groups = 2\nppo.clip_eps = 0.1\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.env.n_groups, 2);
        assert_eq!(cfg.ppo.clip_eps, 0.1);
        assert!(matches!(
            cfg.env.mode_for(0.9).unwrap(),
            Mode::PerformanceGuaranteed { .. }
        ));
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let err = RunConfig::from_toml_str("env.n_grops = 4\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("n_grops"), "{msg}");
    }

    #[test]
    fn bad_mode_string_names_the_key() {
        let cfg = RunConfig::from_toml_str("env.mode = \"both\"\n").unwrap();
        let err = cfg.env.mode_for(0.9).unwrap_err();
        assert!(err.to_string().starts_with("env.mode"));
    }

    #[test]
    fn hash_is_stable_and_content_sensitive() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }

    #[test]
    fn acc_target_drop_resolves_against_baseline() {
        let cfg = RunConfig::from_toml_str(
            "env.mode = \"performance_guaranteed\"\nenv.acc_target_drop = 0.05\n",
        )
        .unwrap();
        match cfg.env.mode_for(0.9).unwrap() {
            Mode::PerformanceGuaranteed { acc_target } => {
                assert!((acc_target - 0.85).abs() < 1e-12)
            }
            other => panic!("wrong mode {other:?}"),
        }
    }
}
