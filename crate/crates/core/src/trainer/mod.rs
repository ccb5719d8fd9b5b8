//! End-to-end training: episode collection, the ordered update stages,
//! metrics, checkpoints and evaluation.

mod eval;
mod learner;
mod rollout;

pub use eval::{
    evaluate, evaluate_nets, load_networks, write_eval_csv, EpisodeRecord, EvalConfig, EvalReport, LevelSummary, EVAL_EPISODES_FILE,
    EVAL_SUMMARY_FILE,
};
pub use learner::{Learner, UpdateStats};
pub use rollout::{run_episode, ActionMode, Episode, OverrideEvent, Screener};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::AdvantageError;
use crate::autograd::{save_checkpoint, AdamConfig, AutogradError, CheckpointError};
use crate::cli::Config;
use crate::envs::{make_env, EnvError, EnvKind};
use crate::focops::FocopsError;
use crate::homography::{HomographyError, SolveGrad};
use crate::nets::{CadeNetworks, NetError};

/// Hash of the crate sources this binary was built from.
pub const CODE_HASH: &str = env!("CADE_CODE_HASH");

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Homography(#[from] HomographyError),
    #[error(transparent)]
    Focops(#[from] FocopsError),
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] toml::ser::Error),
    #[error("non-finite value in the {stage} stage at iteration {iteration}{}", snapshot.as_ref().map(|p| format!("; snapshot at {}", p.display())).unwrap_or_default())]
    Diverged {
        stage: Stage,
        iteration: u64,
        snapshot: Option<PathBuf>,
    },
}

/// Phases of one training iteration, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Collect,
    Lagrange,
    Sdm,
    CostEstimator,
    RewardAdvantage,
    CostAdvantage,
    RewardEstimator,
    Actor,
}

impl Stage {
    /// Update stages applied to each collected episode.
    pub const UPDATES: [Stage; 7] = [
        Stage::Lagrange,
        Stage::Sdm,
        Stage::CostEstimator,
        Stage::RewardAdvantage,
        Stage::CostAdvantage,
        Stage::RewardEstimator,
        Stage::Actor,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Collect => "collect",
            Stage::Lagrange => "lagrange",
            Stage::Sdm => "sdm",
            Stage::CostEstimator => "cost-estimator",
            Stage::RewardAdvantage => "reward-advantage",
            Stage::CostAdvantage => "cost-advantage",
            Stage::RewardEstimator => "reward-estimator",
            Stage::Actor => "actor",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Environment step budget; unset means the environment default.
    pub steps: Option<u64>,
    pub episodes_per_iter: usize,
    pub actor_epochs: usize,
    /// Penalize the model-based cost advantage with the Lagrange multiplier.
    pub lagrangian: bool,
    pub sdm_batch: usize,
    pub cost_batch: usize,
    /// Checkpoint period in iterations; 0 writes the final checkpoint only.
    pub checkpoint_every: u64,
    pub solve_grad: SolveGrad,
    pub policy_optim: AdamConfig,
    /// Shared by the reward, value, cost and dynamics networks.
    pub model_optim: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: None,
            episodes_per_iter: 1,
            actor_epochs: 1,
            lagrangian: false,
            sdm_batch: 64,
            cost_batch: 64,
            checkpoint_every: 0,
            solve_grad: SolveGrad::Analytic,
            policy_optim: AdamConfig::default(),
            model_optim: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn budget(&self, env: EnvKind) -> u64 {
        self.steps.unwrap_or(match env {
            EnvKind::CliffCircular => 150_000,
            EnvKind::PlanarRiver => 300_000,
        })
    }
}

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 0,
    Env = 1,
    Policy = 2,
    Safety = 3,
    CostAdvantage = 4,
    EvalEnv = 5,
    EvalPolicy = 6,
    EvalSafety = 7,
    Dataset = 8,
    DynInit = 9,
    DynShuffle = 10,
}

pub fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Fresh networks for `cfg.env` from the run seed.
pub fn init_networks(cfg: &Config, seed: u64) -> CadeNetworks {
    let env = make_env(cfg.env, cfg.level, &cfg.envs);
    let (rows, cols) = env.obs_shape();
    CadeNetworks::new(&mut stream(seed, Stream::Init), rows * cols, env.action_space(), &cfg.nets)
}

/// One row of metrics.csv.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: u64,
    /// Cumulative environment steps after this iteration's collection.
    pub steps: u64,
    pub ep_reward: f64,
    pub ep_cost: f64,
    pub beta: f64,
    pub kl: f64,
    pub loss_pi: f64,
    pub loss_r: f64,
    pub loss_c: f64,
    pub loss_sdm: f64,
    pub override_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub code_hash: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub iterations: u64,
    pub env_steps: u64,
    pub checkpoints: Vec<String>,
    pub config: Config,
    pub metrics: Vec<MetricsRow>,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| e.to_string())
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.toml";
pub const CONFIG_FILE: &str = "config.toml";
pub const OVERRIDES_FILE: &str = "overrides.csv";
pub const FINAL_CHECKPOINT: &str = "final.cade";

#[derive(Serialize)]
struct OverrideRow<'a> {
    iteration: u64,
    t: usize,
    proposed: &'a str,
    chosen: &'a str,
    proposed_cost: f64,
    chosen_cost: f64,
}

/// Trains one seed into `run_dir`.
pub fn train(cfg: &Config, seed: u64, run_dir: &Path) -> Result<RunManifest, TrainError> {
    train_observed(cfg, seed, run_dir, &mut |_| {})
}

/// Like [`train`], reporting each stage to `observe` as it starts.
pub fn train_observed(cfg: &Config, seed: u64, run_dir: &Path, observe: &mut dyn FnMut(Stage)) -> Result<RunManifest, TrainError> {
    let started = now();
    fs::create_dir_all(run_dir)?;
    fs::write(run_dir.join(CONFIG_FILE), toml::to_string(cfg)?)?;
    let budget = cfg.train.budget(cfg.env);
    let mut env = make_env(cfg.env, cfg.level, &cfg.envs);
    let mut learner = Learner::new(init_networks(cfg, seed), cfg, stream(seed, Stream::CostAdvantage));
    let mut env_rng = stream(seed, Stream::Env);
    let mut policy_rng = stream(seed, Stream::Policy);
    let mut safety_rng = stream(seed, Stream::Safety);
    let threshold = cfg.safety.threshold_for(cfg.env);

    let mut metrics = csv::Writer::from_path(run_dir.join(METRICS_FILE))?;
    let mut overrides = if cfg.safety.mode.in_training() {
        Some(csv::Writer::from_path(run_dir.join(OVERRIDES_FILE))?)
    } else {
        None
    };
    let mut rows = Vec::new();
    let mut checkpoints = Vec::new();
    let mut steps = 0u64;
    let mut iteration = 0u64;

    while steps < budget {
        observe(Stage::Collect);
        let screening = cfg.safety.active_in_training(steps, budget);
        let mut episodes = Vec::with_capacity(cfg.train.episodes_per_iter);
        for _ in 0..cfg.train.episodes_per_iter {
            let env_seed = env_rng.random::<u64>();
            let ep = if screening {
                let screen = Screener {
                    model: &learner.nets,
                    cfg: &cfg.safety,
                    threshold,
                };
                run_episode(env.as_mut(), &learner.nets, env_seed, ActionMode::Sample, Some(&screen), &mut policy_rng, &mut safety_rng)?
            } else {
                run_episode::<CadeNetworks, _, _>(env.as_mut(), &learner.nets, env_seed, ActionMode::Sample, None, &mut policy_rng, &mut safety_rng)?
            };
            steps += ep.traj.len() as u64;
            episodes.push(ep);
        }

        let mut stats = Vec::with_capacity(episodes.len());
        for ep in &episodes {
            match learner.update(ep, cfg, observe) {
                Ok(s) => stats.push(s),
                Err(TrainError::Diverged { stage, .. }) => {
                    let snapshot = run_dir.join("diverged.cade");
                    save_checkpoint(&snapshot, &learner.nets.named_tensors())?;
                    metrics.flush()?;
                    return Err(TrainError::Diverged {
                        stage,
                        iteration,
                        snapshot: Some(snapshot),
                    });
                }
                Err(e) => return Err(e),
            }
        }

        let n = episodes.len() as f64;
        let mean = |f: &dyn Fn(usize) -> f64| (0..episodes.len()).map(f).sum::<f64>() / n;
        let total_steps: usize = episodes.iter().map(|e| e.traj.len()).sum();
        let total_overrides: usize = episodes.iter().map(|e| e.overrides.len()).sum();
        let row = MetricsRow {
            iteration,
            steps,
            ep_reward: mean(&|i| episodes[i].traj.episode_return()),
            ep_cost: mean(&|i| episodes[i].traj.episode_cost()),
            beta: learner.lagrange.beta,
            kl: mean(&|i| stats[i].kl),
            loss_pi: mean(&|i| stats[i].loss_pi),
            loss_r: mean(&|i| stats[i].loss_r),
            loss_c: mean(&|i| stats[i].loss_c),
            loss_sdm: mean(&|i| stats[i].loss_sdm),
            override_rate: total_overrides as f64 / total_steps.max(1) as f64,
        };
        metrics.serialize(&row)?;
        if let Some(w) = overrides.as_mut() {
            for ev in episodes.iter().flat_map(|e| &e.overrides) {
                w.serialize(OverrideRow {
                    iteration,
                    t: ev.t,
                    proposed: &crate::envs::action_label(&ev.proposed),
                    chosen: &crate::envs::action_label(&ev.chosen),
                    proposed_cost: ev.proposed_cost,
                    chosen_cost: ev.chosen_cost,
                })?;
            }
        }
        rows.push(row);
        iteration += 1;
        if cfg.train.checkpoint_every > 0 && iteration % cfg.train.checkpoint_every == 0 {
            let name = format!("ckpt_{iteration:06}.cade");
            save_checkpoint(&run_dir.join(&name), &learner.nets.named_tensors())?;
            checkpoints.push(name);
        }
    }
    metrics.flush()?;
    if let Some(w) = overrides.as_mut() {
        w.flush()?;
    }
    save_checkpoint(&run_dir.join(FINAL_CHECKPOINT), &learner.nets.named_tensors())?;
    checkpoints.push(FINAL_CHECKPOINT.to_string());

    let manifest = RunManifest {
        seed,
        code_hash: CODE_HASH.to_string(),
        started_unix: started,
        finished_unix: now(),
        iterations: iteration,
        env_steps: steps,
        checkpoints,
        config: cfg.clone(),
        metrics: rows,
    };
    fs::write(run_dir.join(MANIFEST_FILE), toml::to_string(&manifest)?)?;
    Ok(manifest)
}
