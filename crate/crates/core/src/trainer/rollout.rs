use rand::Rng;

use crate::advantage::Trajectory;
use crate::envs::Env;
use crate::focops::FocopsError;
use crate::homography::PatchGrid;
use crate::nets::{greedy_action, sample_action, Action, CadeNetworks};
use crate::safety::{screen_action, SafetyConfig, WorldModel};

use super::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ActionMode {
    #[default]
    Sample,
    Greedy,
}

/// An active safety screen for one episode.
pub struct Screener<'a, M: WorldModel> {
    pub model: &'a M,
    pub cfg: &'a SafetyConfig,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OverrideEvent {
    pub t: usize,
    pub proposed: Action,
    pub chosen: Action,
    pub proposed_cost: f64,
    pub chosen_cost: f64,
}

/// One collected episode.
#[derive(Clone, Debug)]
pub struct Episode {
    pub traj: Trajectory,
    pub grids: Vec<PatchGrid>,
    /// Trunk state after consuming observation `t`.
    pub hidden: Vec<Vec<f64>>,
    pub overrides: Vec<OverrideEvent>,
}

impl Episode {
    pub fn override_rate(&self) -> f64 {
        if self.traj.is_empty() {
            0.0
        } else {
            self.overrides.len() as f64 / self.traj.len() as f64
        }
    }
}

/// Runs one episode with the current policy, recording everything the
/// update needs: behaviour logits and log-probabilities, the estimated
/// reward and value at each step.
///
/// When the screen's world model cannot warp a prediction, the proposal is
/// kept.
pub fn run_episode<M: WorldModel, R: Rng, S: Rng>(
    env: &mut dyn Env,
    nets: &CadeNetworks,
    env_seed: u64,
    mode: ActionMode,
    screen: Option<&Screener<'_, M>>,
    policy_rng: &mut R,
    safety_rng: &mut S,
) -> Result<Episode, TrainError> {
    let mut obs = env.reset(env_seed);
    let mut hidden = vec![0.0; nets.hidden_dim()];
    let mut prev: Option<Action> = None;
    let mut traj = Trajectory::default();
    let mut grids = Vec::new();
    let mut hiddens = Vec::new();
    let mut overrides = Vec::new();
    loop {
        let b = nets.cade_forward(obs.data(), prev.as_deref(), &hidden)?;
        let (proposed, lp) = match mode {
            ActionMode::Sample => sample_action(&b.logits, &nets.space, policy_rng)?,
            ActionMode::Greedy => greedy_action(&b.logits, &nets.space),
        };
        let (action, lp) = match screen {
            None => (proposed, lp),
            Some(s) => {
                match screen_action(s.model, &obs, &b.hidden, &b.logits, &proposed, lp, s.cfg, s.threshold, safety_rng) {
                    Ok(sc) => {
                        if sc.overridden {
                            overrides.push(OverrideEvent {
                                t: traj.len(),
                                proposed: proposed.clone(),
                                chosen: sc.action.clone(),
                                proposed_cost: sc.proposed_cost,
                                chosen_cost: sc.chosen_cost,
                            });
                        }
                        (sc.action, sc.log_prob)
                    }
                    Err(FocopsError::Homography(_)) => (proposed, lp),
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let step = env.step(&action)?;
        let done = step.terminal();
        traj.obs.push(obs.data().to_vec());
        traj.est_rewards.push(nets.reward_eval(&b.hidden, &action));
        traj.values.push(nets.value_eval(&b.hidden));
        traj.actions.push(action.clone());
        traj.rewards.push(step.reward);
        traj.costs.push(step.cost);
        traj.log_probs.push(lp);
        traj.logits.push(b.logits);
        traj.kinds.push(step.kind);
        grids.push(obs);
        hiddens.push(b.hidden.clone());
        obs = step.obs;
        hidden = b.hidden;
        prev = Some(action);
        if done {
            break;
        }
    }
    traj.obs.push(obs.data().to_vec());
    grids.push(obs);
    Ok(Episode {
        traj,
        grids,
        hidden: hiddens,
        overrides,
    })
}
