//! Coverage environments with submodular rewards and Markovian costs.
//!
//! Both environments reward the first visit to each element of a fixed set
//! (track cells or river segments) and emit binary patch-grid observations.

mod cliff;
mod log;
mod river;

pub use cliff::{cost_from_view, CliffCircular, CliffConfig};
pub use log::{action_label, write_episode_csv, write_observations, LogRow};
pub use river::{patchify, CameraConfig, Nearest, PlanarRiver, Pose, RiverConfig, RiverMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::homography::PatchGrid;
use crate::nets::ActionSpace;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid action {action:?} for action space {branches:?}")]
    InvalidAction { action: Vec<usize>, branches: Vec<usize> },
    #[error("step called on a finished episode")]
    Finished,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    CliffCircular,
    PlanarRiver,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::CliffCircular => "cliff-circular",
            EnvKind::PlanarRiver => "planar-river",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Level {
    Easy,
    Medium,
    Hard,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Easy, Level::Medium, Level::Hard];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level::Easy => "easy",
            Level::Medium => "medium",
            Level::Hard => "hard",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalKind {
    None,
    Minor,
    Severe,
    Timeout,
}

impl TerminalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminalKind::None => "none",
            TerminalKind::Minor => "minor",
            TerminalKind::Severe => "severe",
            TerminalKind::Timeout => "timeout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: PatchGrid,
    pub reward: f64,
    pub cost: f64,
    pub kind: TerminalKind,
}

impl StepResult {
    pub fn terminal(&self) -> bool {
        self.kind != TerminalKind::None
    }
}

/// A single-owner episodic environment.
pub trait Env: Send {
    /// Starts a fresh episode; the same seed always gives the same episode.
    fn reset(&mut self, seed: u64) -> PatchGrid;
    fn step(&mut self, action: &[usize]) -> Result<StepResult, EnvError>;
    fn action_space(&self) -> ActionSpace;
    /// `(rows, cols)` of every observation.
    fn obs_shape(&self) -> (usize, usize);
    /// Visit flags of the rewarded set (track cells or river segments).
    fn visited(&self) -> &[bool];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub timeout: usize,
    pub cliff: CliffConfig,
    pub river: RiverConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            timeout: 500,
            cliff: CliffConfig::default(),
            river: RiverConfig::default(),
        }
    }
}

pub fn make_env(kind: EnvKind, level: Level, cfg: &EnvConfig) -> Box<dyn Env> {
    match kind {
        EnvKind::CliffCircular => Box::new(CliffCircular::new(level, cfg.cliff.clone(), cfg.timeout)),
        EnvKind::PlanarRiver => Box::new(PlanarRiver::new(level, cfg.river.clone(), cfg.timeout)),
    }
}

/// `Δ(s | S)`: 1 if `s` is a rewarded element not yet in `visited`.
pub fn marginal_gain(visited: &[bool], s: Option<usize>) -> f64 {
    match s {
        Some(i) if !visited[i] => 1.0,
        _ => 0.0,
    }
}

/// Reward of the transition between two consecutive visit sets: the
/// coverage gained, `f(S′) − f(S)`.
pub fn true_marginal_gain(before: &[bool], after: &[bool]) -> f64 {
    before.iter().zip(after).filter(|(b, a)| !**b && **a).count() as f64
}

fn check_action(space: &ActionSpace, action: &[usize]) -> Result<(), EnvError> {
    space.validate(action).map_err(|_| EnvError::InvalidAction {
        action: action.to_vec(),
        branches: space.branches().to_vec(),
    })
}
