use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::advantage::AdvConfig;
use crate::dynbench::DynConfig;
use crate::envs::{EnvConfig, EnvKind, Level};
use crate::focops::{CostAdvConfig, LagrangeConfig, TrustRegionConfig};
use crate::nets::NetConfig;
use crate::safety::SafetyConfig;
use crate::trainer::{EvalConfig, TrainConfig};

use super::CliError;

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub env: EnvKind,
    pub level: Level,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Run directory name; derived from the run settings when unset.
    pub run_id: Option<String>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub adv: AdvConfig,
    pub lagrange: LagrangeConfig,
    pub trust: TrustRegionConfig,
    pub cost_adv: CostAdvConfig,
    pub safety: SafetyConfig,
    pub nets: NetConfig,
    pub envs: EnvConfig,
    pub dyn_bench: DynConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            env: EnvKind::CliffCircular,
            level: Level::Medium,
            seeds: vec![0],
            out_dir: PathBuf::from("runs"),
            run_id: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            adv: AdvConfig::default(),
            lagrange: LagrangeConfig::default(),
            trust: TrustRegionConfig::default(),
            cost_adv: CostAdvConfig::default(),
            safety: SafetyConfig::default(),
            nets: NetConfig::default(),
            envs: EnvConfig::default(),
            dyn_bench: DynConfig::default(),
        }
    }
}

fn invalid(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{key}: {msg}"))
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Range checks that serde cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let t = &self.train;
        for (key, v) in [
            ("train.episodes_per_iter", t.episodes_per_iter),
            ("train.actor_epochs", t.actor_epochs),
            ("train.sdm_batch", t.sdm_batch),
            ("train.cost_batch", t.cost_batch),
            ("safety.samples", self.safety.samples),
            ("safety.horizon", self.safety.horizon),
            ("cost_adv.horizon", self.cost_adv.horizon),
            ("adv.window", self.adv.window),
            ("nets.hidden", self.nets.hidden),
            ("eval.episodes", self.eval.episodes),
            ("dyn_bench.epochs", self.dyn_bench.epochs),
            ("dyn_bench.batch", self.dyn_bench.batch),
            ("dyn_bench.horizon", self.dyn_bench.horizon),
            ("dyn_bench.train_size", self.dyn_bench.train_size),
            ("dyn_bench.test_size", self.dyn_bench.test_size),
        ] {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        for (key, v) in [
            ("train.policy_optim.lr", t.policy_optim.lr),
            ("train.model_optim.lr", t.model_optim.lr),
            ("dyn_bench.lr", self.dyn_bench.lr),
            ("lagrange.lr", self.lagrange.lr),
            ("trust.inv_alpha", self.trust.inv_alpha),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(key, format!("must be positive, got {v}")));
            }
        }
        for (key, v) in [("adv.gamma", self.adv.gamma), ("adv.lambda", self.adv.lambda), ("cost_adv.gamma", self.cost_adv.gamma)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(key, format!("must lie in [0, 1], got {v}")));
            }
        }
        if !(0.0..=1.0).contains(&self.safety.activation) {
            return Err(invalid("safety.activation", "must lie in [0, 1]"));
        }
        if let Some(th) = self.safety.threshold {
            if !(th > 0.0) {
                return Err(invalid("safety.threshold", format!("must be positive, got {th}")));
            }
        }
        if self.lagrange.beta_max < 0.0 || self.lagrange.budget < 0.0 {
            return Err(invalid("lagrange", "beta_max and budget must be non-negative"));
        }
        if self.trust.kl_mask < 0.0 || self.trust.kl_stop < 0.0 {
            return Err(invalid("trust", "KL limits must be non-negative"));
        }
        Ok(())
    }

    /// Default run directory name.
    pub fn default_run_id(&self, seed: u64) -> String {
        let mut id = format!("{}-{}-{}", self.env.as_str(), self.level.as_str(), self.adv.kind.as_str());
        if self.train.lagrangian {
            id.push_str("-lagrangian");
        }
        if self.safety.mode.in_training() {
            id.push_str("-safety");
        }
        format!("{id}-s{seed}")
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        let id = match &self.run_id {
            Some(id) if self.seeds.len() > 1 => format!("{id}-s{seed}"),
            Some(id) => id.clone(),
            None => self.default_run_id(seed),
        };
        self.out_dir.join(id)
    }
}
