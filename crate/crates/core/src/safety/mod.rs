//! Execution-time safety layer: imagined rollouts through the semantic
//! dynamics model and cost estimator, overriding actions predicted unsafe.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::EnvKind;
use crate::focops::FocopsError;
use crate::homography::{sdm_predict, PatchGrid};
use crate::nets::{log_prob, sample_action, Action, ActionSpace, CadeNetworks};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SafetyMode {
    #[default]
    Off,
    Train,
    Infer,
    Both,
}

impl SafetyMode {
    pub fn in_training(self) -> bool {
        matches!(self, SafetyMode::Train | SafetyMode::Both)
    }

    pub fn in_inference(self) -> bool {
        matches!(self, SafetyMode::Infer | SafetyMode::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SafetyConfig {
    pub mode: SafetyMode,
    /// Imagined trajectories per screen.
    pub samples: usize,
    pub horizon: usize,
    /// Override threshold; unset means the environment default.
    pub threshold: Option<f64>,
    /// Fraction of the training budget after which screening starts.
    pub activation: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            mode: SafetyMode::Off,
            samples: 10,
            horizon: 1,
            threshold: None,
            activation: 1.0 / 3.0,
        }
    }
}

impl SafetyConfig {
    /// The smallest single-step cost that ends an episode.
    pub fn threshold_for(&self, env: EnvKind) -> f64 {
        self.threshold.unwrap_or(match env {
            EnvKind::CliffCircular => 1.0,
            EnvKind::PlanarRiver => 0.5,
        })
    }

    /// Whether screening runs at training step `step` of `budget`.
    pub fn active_in_training(&self, step: u64, budget: u64) -> bool {
        self.mode.in_training() && step as f64 >= self.activation * budget as f64
    }
}

/// What the safety layer needs from the learned models.
pub trait WorldModel {
    fn space(&self) -> &ActionSpace;
    fn predict(&self, obs: &PatchGrid, action: &[usize]) -> Result<PatchGrid, FocopsError>;
    fn cost(&self, obs: &PatchGrid) -> f64;
    /// Policy logits and next hidden state for an observation reached by
    /// `prev_action`.
    fn policy_step(&self, obs: &PatchGrid, prev_action: &[usize], hidden: &[f64]) -> Result<(Vec<f64>, Vec<f64>), FocopsError>;
}

impl WorldModel for CadeNetworks {
    fn space(&self) -> &ActionSpace {
        &self.space
    }

    fn predict(&self, obs: &PatchGrid, action: &[usize]) -> Result<PatchGrid, FocopsError> {
        Ok(sdm_predict(obs, action, self)?)
    }

    fn cost(&self, obs: &PatchGrid) -> f64 {
        self.cost_eval(obs.data())
    }

    fn policy_step(&self, obs: &PatchGrid, prev_action: &[usize], hidden: &[f64]) -> Result<(Vec<f64>, Vec<f64>), FocopsError> {
        let b = self.cade_forward(obs.data(), Some(prev_action), hidden)?;
        Ok((b.logits, b.hidden))
    }
}

/// The trained networks with the cost estimator replaced by a constant.
pub struct FixedCost<'a> {
    pub nets: &'a CadeNetworks,
    pub value: f64,
}

impl WorldModel for FixedCost<'_> {
    fn space(&self) -> &ActionSpace {
        &self.nets.space
    }

    fn predict(&self, obs: &PatchGrid, action: &[usize]) -> Result<PatchGrid, FocopsError> {
        self.nets.predict(obs, action)
    }

    fn cost(&self, _obs: &PatchGrid) -> f64 {
        self.value
    }

    fn policy_step(&self, obs: &PatchGrid, prev_action: &[usize], hidden: &[f64]) -> Result<(Vec<f64>, Vec<f64>), FocopsError> {
        self.nets.policy_step(obs, prev_action, hidden)
    }
}

/// Outcome of screening one proposed action.
#[derive(Clone, Debug, PartialEq)]
pub struct Screen {
    pub action: Action,
    pub log_prob: f64,
    pub overridden: bool,
    /// Lowest imagined cost among rollouts starting with the proposal.
    pub proposed_cost: f64,
    /// Imagined cost of the returned action's rollout.
    pub chosen_cost: f64,
}

/// Undiscounted predicted cost of one imagined trajectory starting with
/// `first`. `hidden` is the trunk state after consuming `obs`.
pub fn rollout_cost<M: WorldModel, R: Rng>(
    model: &M,
    obs: &PatchGrid,
    first: &[usize],
    hidden: &[f64],
    horizon: usize,
    rng: &mut R,
) -> Result<f64, FocopsError> {
    let mut s = model.predict(obs, first)?;
    let mut total = model.cost(&s);
    let mut h = hidden.to_vec();
    let mut a = first.to_vec();
    for _ in 1..horizon {
        let (logits, next_h) = model.policy_step(&s, &a, &h)?;
        let (next, _) = sample_action(&logits, model.space(), rng)?;
        s = model.predict(&s, &next)?;
        total += model.cost(&s);
        h = next_h;
        a = next;
    }
    Ok(total)
}

/// Screens `proposed` (sampled from `logits` with log-probability
/// `proposed_lp`).
///
/// When every imagined trajectory from the proposal reaches `threshold`,
/// `samples` alternatives with policy-sampled first actions are imagined and
/// the cheapest one's first action is returned, unless it would cost more
/// than the proposal.
#[allow(clippy::too_many_arguments)]
pub fn screen_action<M: WorldModel, R: Rng>(
    model: &M,
    obs: &PatchGrid,
    hidden: &[f64],
    logits: &[f64],
    proposed: &[usize],
    proposed_lp: f64,
    cfg: &SafetyConfig,
    threshold: f64,
    rng: &mut R,
) -> Result<Screen, FocopsError> {
    let n = cfg.samples.max(1);
    let mut proposed_cost = f64::INFINITY;
    let mut all_unsafe = true;
    for _ in 0..n {
        let c = rollout_cost(model, obs, proposed, hidden, cfg.horizon, rng)?;
        proposed_cost = proposed_cost.min(c);
        all_unsafe &= c >= threshold;
    }
    let keep = Screen {
        action: proposed.to_vec(),
        log_prob: proposed_lp,
        overridden: false,
        proposed_cost,
        chosen_cost: proposed_cost,
    };
    if !all_unsafe {
        return Ok(keep);
    }
    let mut best: Option<(f64, Action)> = None;
    for _ in 0..n {
        let (a, _) = sample_action(logits, model.space(), rng)?;
        let c = rollout_cost(model, obs, &a, hidden, cfg.horizon, rng)?;
        if best.as_ref().is_none_or(|(bc, _)| c < *bc) {
            best = Some((c, a));
        }
    }
    match best {
        Some((c, a)) if c <= proposed_cost => Ok(Screen {
            log_prob: log_prob(logits, model.space(), &a),
            action: a,
            overridden: true,
            proposed_cost,
            chosen_cost: c,
        }),
        _ => Ok(keep),
    }
}

/// Evaluates `nets` on every configured level with each step screened
/// through `model`.
pub fn inference_overlay<M: WorldModel>(
    nets: &CadeNetworks,
    cfg: &crate::cli::Config,
    seed: u64,
    model: &M,
) -> Result<crate::trainer::EvalReport, crate::trainer::TrainError> {
    crate::trainer::evaluate_nets(nets, cfg, seed, Some(model))
}

#[cfg(test)]
mod tests;
