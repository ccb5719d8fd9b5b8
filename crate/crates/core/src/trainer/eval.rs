use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::load_checkpoint;
use crate::cli::Config;
use crate::envs::{make_env, Level};
use crate::nets::CadeNetworks;
use crate::safety::WorldModel;

use super::{init_networks, run_episode, stream, ActionMode, Screener, Stream, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    /// Take the most likely action instead of sampling.
    pub greedy: bool,
    pub levels: Vec<Level>,
    /// Checkpoint to evaluate; defaults to the run's final checkpoint.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 30,
            greedy: false,
            levels: Level::ALL.to_vec(),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub level: Level,
    pub episode: usize,
    pub reward: f64,
    pub cost: f64,
    pub steps: usize,
    pub overrides: usize,
    pub terminal: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSummary {
    pub level: Level,
    pub episodes: usize,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub cost_mean: f64,
    pub cost_std: f64,
    pub override_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub episodes: Vec<EpisodeRecord>,
    pub summary: Vec<LevelSummary>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Networks for `cfg.env` with parameters read from `checkpoint`.
pub fn load_networks(cfg: &Config, checkpoint: &Path) -> Result<CadeNetworks, TrainError> {
    if !checkpoint.is_file() {
        return Err(TrainError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint file not found: {}", checkpoint.display()),
        )));
    }
    let tensors = load_checkpoint(checkpoint)?;
    let mut nets = init_networks(cfg, 0);
    nets.load_tensors(&tensors)?;
    Ok(nets)
}

/// Runs `cfg.eval.episodes` episodes on every level in `cfg.eval.levels`.
/// With `screen_model` set, every step is screened through it.
pub fn evaluate_nets<M: WorldModel>(nets: &CadeNetworks, cfg: &Config, seed: u64, screen_model: Option<&M>) -> Result<EvalReport, TrainError> {
    let mode = if cfg.eval.greedy { ActionMode::Greedy } else { ActionMode::Sample };
    let screen = screen_model.map(|m| Screener {
        model: m,
        cfg: &cfg.safety,
        threshold: cfg.safety.threshold_for(cfg.env),
    });
    let mut report = EvalReport::default();
    for &level in &cfg.eval.levels {
        let mut env = make_env(cfg.env, level, &cfg.envs);
        let mut env_rng = stream(seed, Stream::EvalEnv);
        let mut policy_rng = stream(seed, Stream::EvalPolicy);
        let mut safety_rng = stream(seed, Stream::EvalSafety);
        let (mut rewards, mut costs) = (Vec::new(), Vec::new());
        let (mut steps, mut overrides) = (0usize, 0usize);
        for episode in 0..cfg.eval.episodes {
            let env_seed = env_rng.random::<u64>();
            let ep = run_episode(env.as_mut(), nets, env_seed, mode, screen.as_ref(), &mut policy_rng, &mut safety_rng)?;
            let rec = EpisodeRecord {
                level,
                episode,
                reward: ep.traj.episode_return(),
                cost: ep.traj.episode_cost(),
                steps: ep.traj.len(),
                overrides: ep.overrides.len(),
                terminal: ep.traj.kinds.last().map(|k| k.as_str()).unwrap_or("none").to_string(),
            };
            rewards.push(rec.reward);
            costs.push(rec.cost);
            steps += rec.steps;
            overrides += rec.overrides;
            report.episodes.push(rec);
        }
        let (reward_mean, reward_std) = mean_std(&rewards);
        let (cost_mean, cost_std) = mean_std(&costs);
        report.summary.push(LevelSummary {
            level,
            episodes: cfg.eval.episodes,
            reward_mean,
            reward_std,
            cost_mean,
            cost_std,
            override_rate: overrides as f64 / steps.max(1) as f64,
        });
    }
    Ok(report)
}

pub const EVAL_EPISODES_FILE: &str = "eval_episodes.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.csv";

pub fn write_eval_csv(dir: &Path, report: &EvalReport) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join(EVAL_EPISODES_FILE))?;
    for r in &report.episodes {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join(EVAL_SUMMARY_FILE))?;
    for r in &report.summary {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads `checkpoint` and evaluates it, screening actions when the safety
/// layer is enabled for inference.
pub fn evaluate(cfg: &Config, checkpoint: &Path, seed: u64) -> Result<EvalReport, TrainError> {
    let nets = load_networks(cfg, checkpoint)?;
    let model = cfg.safety.mode.in_inference().then_some(&nets);
    evaluate_nets(&nets, cfg, seed, model)
}
