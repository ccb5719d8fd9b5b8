//! Reward advantage estimators.
//!
//! All estimators are pure functions of a finished episode. Critic-based
//! ones take `values` of length `T + 1`, the last entry being the bootstrap
//! value after the final step (0 for terminated and timed-out episodes).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::envs::TerminalKind;
use crate::nets::Action;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdvantageError {
    #[error("trajectory field {field} has length {found}, expected {expected}")]
    Length { field: &'static str, expected: usize, found: usize },
    #[error("reward {0} at step {1} is not 0 or 1")]
    Reward(f64, usize),
    #[error("non-finite {0} at step {1}")]
    NonFinite(&'static str, usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum AdvKind {
    Mgae,
    Td,
    Gae,
    GaeRtg,
    Reinforce,
    Vtrace,
}

impl AdvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AdvKind::Mgae => "mgae",
            AdvKind::Td => "td",
            AdvKind::Gae => "gae",
            AdvKind::GaeRtg => "gae-rtg",
            AdvKind::Reinforce => "reinforce",
            AdvKind::Vtrace => "vtrace",
        }
    }
}

/// Whether the backward estimated-reward sum at step `j` includes `r̂_j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MgaeMode {
    #[default]
    Inclusive,
    Exclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvConfig {
    pub kind: AdvKind,
    pub gamma: f64,
    pub lambda: f64,
    pub vtrace_c: f64,
    pub mgae_mode: MgaeMode,
    pub window: usize,
    pub normalize: bool,
}

impl Default for AdvConfig {
    fn default() -> Self {
        Self {
            kind: AdvKind::Mgae,
            gamma: 0.99,
            lambda: 0.95,
            vtrace_c: 1.0,
            mgae_mode: MgaeMode::Inclusive,
            window: 10,
            normalize: false,
        }
    }
}

/// One episode as collected. `obs` holds `T + 1` observations (including
/// the one after the last step); every other field holds `T` entries.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub obs: Vec<Vec<f64>>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub est_rewards: Vec<f64>,
    pub costs: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Behaviour-policy logits at each step.
    pub logits: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub kinds: Vec<TerminalKind>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn episode_return(&self) -> f64 {
        self.rewards.iter().sum()
    }

    pub fn episode_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    /// Critic values followed by a zero bootstrap.
    pub fn bootstrapped_values(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.push(0.0);
        v
    }

    pub fn validate(&self) -> Result<(), AdvantageError> {
        let t = self.len();
        let check = |field, found: usize, expected| {
            if found == expected {
                Ok(())
            } else {
                Err(AdvantageError::Length { field, expected, found })
            }
        };
        check("obs", self.obs.len(), t + 1)?;
        check("rewards", self.rewards.len(), t)?;
        check("est_rewards", self.est_rewards.len(), t)?;
        check("costs", self.costs.len(), t)?;
        check("log_probs", self.log_probs.len(), t)?;
        check("logits", self.logits.len(), t)?;
        check("values", self.values.len(), t)?;
        check("kinds", self.kinds.len(), t)?;
        for i in 0..t {
            if self.rewards[i] != 0.0 && self.rewards[i] != 1.0 {
                return Err(AdvantageError::Reward(self.rewards[i], i));
            }
            for (name, v) in [
                ("estimated reward", self.est_rewards[i]),
                ("cost", self.costs[i]),
                ("log-prob", self.log_probs[i]),
                ("value", self.values[i]),
            ] {
                if !v.is_finite() {
                    return Err(AdvantageError::NonFinite(name, i));
                }
            }
        }
        Ok(())
    }
}

/// Returns of the last `W` completed episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnWindow {
    cap: usize,
    buf: VecDeque<f64>,
}

impl ReturnWindow {
    pub fn new(cap: usize) -> Self {
        assert!(cap > 0, "window must hold at least one return");
        Self {
            cap,
            buf: VecDeque::with_capacity(cap),
        }
    }

    pub fn push(&mut self, ret: f64) {
        if self.buf.len() == self.cap {
            self.buf.pop_front();
        }
        self.buf.push_back(ret);
    }

    /// Mean of the stored returns; 0 before the first episode completes.
    pub fn mean(&self) -> f64 {
        if self.buf.is_empty() {
            0.0
        } else {
            self.buf.iter().sum::<f64>() / self.buf.len() as f64
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

/// `A_j = Σ_{k≥j} r_k + Σ_{i≤j} r̂_i − baseline` (inclusive) or with the
/// estimated sum over `i < j` (exclusive). Undiscounted.
pub fn mgae(rewards: &[f64], est_rewards: &[f64], baseline: f64, mode: MgaeMode) -> Vec<f64> {
    let t = rewards.len();
    let mut forward = vec![0.0; t];
    let mut acc = 0.0;
    for j in (0..t).rev() {
        acc += rewards[j];
        forward[j] = acc;
    }
    let mut backward = 0.0;
    let mut out = Vec::with_capacity(t);
    for j in 0..t {
        if mode == MgaeMode::Inclusive {
            backward += est_rewards[j];
        }
        out.push(forward[j] + backward - baseline);
        if mode == MgaeMode::Exclusive {
            backward += est_rewards[j];
        }
    }
    out
}

/// `A_t = r_t + γV(s_{t+1}) − V(s_t)`.
pub fn td(rewards: &[f64], values: &[f64], gamma: f64) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| rewards[t] + gamma * values[t + 1] - values[t])
        .collect()
}

/// Exponentially weighted sum of TD errors, `Σ (γλ)^k δ_{t+k}`.
pub fn gae(rewards: &[f64], values: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let deltas = td(rewards, values, gamma);
    let mut out = deltas.clone();
    for t in (0..deltas.len().saturating_sub(1)).rev() {
        out[t] = deltas[t] + gamma * lambda * out[t + 1];
    }
    out
}

/// Discounted return-to-go `G_t`.
pub fn returns_to_go(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// `A_t = G_t − V(s_t)`.
pub fn reinforce_baseline(rewards: &[f64], values: &[f64], gamma: f64) -> Vec<f64> {
    returns_to_go(rewards, gamma)
        .into_iter()
        .zip(values)
        .map(|(g, v)| g - v)
        .collect()
}

/// V-trace targets and policy-gradient advantages.
///
/// With `ρ_t = c_t = min(c, π/μ)`: `v_s = V(s) + Σ_{t≥s} γ^{t−s} (Π_{i<t} c_i) ρ_t δ_t`
/// and `A_s = ρ_s (r_s + γ v_{s+1} − V(s))`, where `v_T` is the bootstrap value.
pub fn vtrace(rewards: &[f64], values: &[f64], gamma: f64, log_pi: &[f64], log_mu: &[f64], c: f64) -> (Vec<f64>, Vec<f64>) {
    let t = rewards.len();
    let rho: Vec<f64> = (0..t).map(|i| (log_pi[i] - log_mu[i]).exp().min(c)).collect();
    let mut vs = vec![0.0; t + 1];
    vs[t] = values[t];
    let mut acc = 0.0;
    for s in (0..t).rev() {
        let delta = rho[s] * (rewards[s] + gamma * values[s + 1] - values[s]);
        acc = delta + gamma * rho[s] * acc;
        vs[s] = values[s] + acc;
    }
    let adv = (0..t)
        .map(|s| rho[s] * (rewards[s] + gamma * vs[s + 1] - values[s]))
        .collect();
    vs.truncate(t);
    (adv, vs)
}

/// Zero mean, unit population variance; fewer than two entries pass
/// through unchanged.
pub fn normalize(adv: &[f64]) -> Vec<f64> {
    if adv.len() < 2 {
        return adv.to_vec();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let sd = var.sqrt() + 1e-8;
    adv.iter().map(|a| (a - mean) / sd).collect()
}

/// Per-step advantages and critic regression targets of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct Estimates {
    pub advantages: Vec<f64>,
    pub value_targets: Vec<f64>,
}

/// Runs the configured estimator. `current_log_probs` are the learner's
/// log-probabilities of the taken actions (used by V-trace only).
pub fn estimate(cfg: &AdvConfig, traj: &Trajectory, window: &ReturnWindow, current_log_probs: &[f64]) -> Estimates {
    let r = &traj.rewards;
    let v = traj.bootstrapped_values();
    let (g, l) = (cfg.gamma, cfg.lambda);
    let (advantages, value_targets) = match cfg.kind {
        AdvKind::Mgae => (
            mgae(r, &traj.est_rewards, window.mean(), cfg.mgae_mode),
            returns_to_go(r, g),
        ),
        AdvKind::Td => {
            let a = td(r, &v, g);
            let tgt = a.iter().zip(&v).map(|(a, v)| a + v).collect();
            (a, tgt)
        }
        AdvKind::Gae => {
            let a = gae(r, &v, g, l);
            let tgt = a.iter().zip(&v).map(|(a, v)| a + v).collect();
            (a, tgt)
        }
        AdvKind::GaeRtg => (gae(r, &v, g, l), returns_to_go(r, g)),
        AdvKind::Reinforce => (reinforce_baseline(r, &v, g), returns_to_go(r, g)),
        AdvKind::Vtrace => vtrace(r, &v, g, current_log_probs, &traj.log_probs, cfg.vtrace_c),
    };
    let advantages = if cfg.normalize { normalize(&advantages) } else { advantages };
    Estimates {
        advantages,
        value_targets,
    }
}
