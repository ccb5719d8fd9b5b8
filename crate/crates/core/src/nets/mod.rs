//! The trainable modules: recurrent trunk, actor, reward estimator, cost
//! estimator and semantic dynamics network.

mod gru;
mod layers;

pub use gru::Gru;
pub use layers::{orthogonal_init, Linear, Mlp};

pub use crate::autograd::{Adam, AdamConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{kernels, AutogradError, Param, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("{what}: expected dimension {expected}, got {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("action {action:?} is invalid for branches {branches:?}")]
    InvalidAction { action: Vec<usize>, branches: Vec<usize> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// One choice per branch of a (multi-)discrete action space.
pub type Action = Vec<usize>;

/// `Discrete(n)` is a single branch; `MultiDiscrete` lists one size per
/// branch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionSpace {
    branches: Vec<usize>,
}

impl ActionSpace {
    pub fn discrete(n: usize) -> Self {
        Self { branches: vec![n] }
    }

    pub fn multi_discrete(sizes: &[usize]) -> Self {
        Self {
            branches: sizes.to_vec(),
        }
    }

    pub fn branches(&self) -> &[usize] {
        &self.branches
    }

    /// Width of the concatenated one-hot encoding and of the logits.
    pub fn width(&self) -> usize {
        self.branches.iter().sum()
    }

    /// Number of joint actions.
    pub fn count(&self) -> usize {
        self.branches.iter().product()
    }

    pub fn validate(&self, a: &[usize]) -> Result<(), NetError> {
        if a.len() != self.branches.len() || a.iter().zip(&self.branches).any(|(x, n)| x >= n) {
            return Err(NetError::InvalidAction {
                action: a.to_vec(),
                branches: self.branches.clone(),
            });
        }
        Ok(())
    }

    /// Writes the one-hot encoding of `a` into `out` (zeroing it first).
    pub fn one_hot_into(&self, a: Option<&[usize]>, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        if let Some(a) = a {
            let mut off = 0;
            for (&x, &n) in a.iter().zip(&self.branches) {
                out[off + x] = 1.0;
                off += n;
            }
        }
    }

    pub fn one_hot(&self, a: Option<&[usize]>) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        self.one_hot_into(a, &mut v);
        v
    }

    /// Joint-action index to per-branch choices (first branch most
    /// significant).
    pub fn from_index(&self, mut idx: usize) -> Action {
        let mut a = vec![0; self.branches.len()];
        for (slot, &n) in a.iter_mut().zip(&self.branches).rev() {
            *slot = idx % n;
            idx /= n;
        }
        a
    }

    pub fn to_index(&self, a: &[usize]) -> usize {
        a.iter().zip(&self.branches).fold(0, |acc, (&x, &n)| acc * n + x)
    }
}

/// Per-branch log-probabilities of a logit row.
pub fn log_probs(logits: &[f64], space: &ActionSpace) -> Vec<f64> {
    let mut lp = logits.to_vec();
    kernels::log_softmax_branches(&mut lp, space.branches());
    lp
}

/// Log-probability of `action` under `logits`: the sum of the chosen
/// entries of every branch's log-softmax.
pub fn log_prob(logits: &[f64], space: &ActionSpace, action: &[usize]) -> f64 {
    let lp = log_probs(logits, space);
    let mut off = 0;
    let mut total = 0.0;
    for (&x, &n) in action.iter().zip(space.branches()) {
        total += lp[off + x];
        off += n;
    }
    total
}

/// Samples every branch independently from its categorical distribution.
pub fn sample_action<R: Rng>(logits: &[f64], space: &ActionSpace, rng: &mut R) -> Result<(Action, f64), NetError> {
    if logits.len() != space.width() {
        return Err(NetError::Dimension {
            what: "logits",
            expected: space.width(),
            found: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(AutogradError::NonFinite { op: "sample_action" }.into());
    }
    let lp = log_probs(logits, space);
    let mut action = Vec::with_capacity(space.branches().len());
    let mut total = 0.0;
    let mut off = 0;
    for &n in space.branches() {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut choice = n - 1;
        for k in 0..n {
            acc += lp[off + k].exp();
            if u < acc {
                choice = k;
                break;
            }
        }
        action.push(choice);
        total += lp[off + choice];
        off += n;
    }
    Ok((action, total))
}

/// Most probable choice per branch.
pub fn greedy_action(logits: &[f64], space: &ActionSpace) -> (Action, f64) {
    let mut action = Vec::new();
    let mut off = 0;
    for &n in space.branches() {
        let seg = &logits[off..off + n];
        let best = (0..n).fold(0, |b, k| if seg[k] > seg[b] { k } else { b });
        action.push(best);
        off += n;
    }
    let lp = log_prob(logits, space, &action);
    (action, lp)
}

/// Closed-form `KL(p‖q)` between two logit rows, summed over branches.
pub fn kl_logits(p: &[f64], q: &[f64], space: &ActionSpace) -> f64 {
    let lp = log_probs(p, space);
    let lq = log_probs(q, space);
    lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// Mean squared error on a tape.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var, AutogradError> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Mean squared error of plain slices.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64, AutogradError> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(AutogradError::Shape {
            op: "mse",
            lhs: vec![pred.len()],
            rhs: vec![target.len()],
        });
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden: usize,
    pub head: Vec<usize>,
    /// Initial scale of the actor's output layer.
    pub actor_out_gain: f64,
    /// Initial scale of the SDM output layer.
    pub sdm_out_gain: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            head: vec![64, 64],
            actor_out_gain: 0.01,
            sdm_out_gain: 0.01,
        }
    }
}

/// Outputs of one recurrent step.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueBundle {
    pub logits: Vec<f64>,
    /// Estimated cost of the current observation.
    pub cost: f64,
    /// Hidden state after this step.
    pub hidden: Vec<f64>,
}

/// Tape nodes of a full-episode unroll.
pub struct Unroll {
    /// `T×hidden`, row t is the state after consuming observation t.
    pub hidden: Var,
    /// `T×width`.
    pub logits: Var,
}

/// Every network of one agent.
#[derive(Clone, Debug)]
pub struct CadeNetworks {
    pub space: ActionSpace,
    pub obs_dim: usize,
    pub trunk: Gru,
    pub actor: Mlp,
    /// Estimated immediate reward from `hidden ⊕ one-hot(action)`.
    pub reward: Mlp,
    /// State value from `hidden`, used only by the critic-based estimators.
    pub value: Mlp,
    /// Estimated immediate cost from the observation.
    pub cost: Mlp,
    /// Corner offsets from `obs ⊕ one-hot(action)`.
    pub sdm: Mlp,
}

fn sizes(input: usize, head: &[usize], output: usize) -> Vec<usize> {
    let mut s = vec![input];
    s.extend_from_slice(head);
    s.push(output);
    s
}

impl CadeNetworks {
    pub fn new<R: Rng>(rng: &mut R, obs_dim: usize, space: ActionSpace, cfg: &NetConfig) -> Self {
        let a = space.width();
        let h = cfg.hidden;
        Self {
            trunk: Gru::new(rng, "trunk", obs_dim + a, h),
            actor: Mlp::new(rng, "actor", &sizes(h, &cfg.head, a), cfg.actor_out_gain),
            reward: Mlp::new(rng, "reward", &sizes(h + a, &cfg.head, 1), 1.0),
            value: Mlp::new(rng, "value", &sizes(h, &cfg.head, 1), 1.0),
            cost: Mlp::new(rng, "cost", &sizes(obs_dim, &cfg.head, 1), 1.0),
            sdm: Mlp::new(rng, "sdm", &sizes(obs_dim + a, &cfg.head, 8), cfg.sdm_out_gain),
            space,
            obs_dim,
        }
    }

    pub fn hidden_dim(&self) -> usize {
        self.trunk.hidden()
    }

    fn check_obs(&self, obs: &[f64]) -> Result<(), NetError> {
        if obs.len() != self.obs_dim {
            return Err(NetError::Dimension {
                what: "observation",
                expected: self.obs_dim,
                found: obs.len(),
            });
        }
        Ok(())
    }

    /// One tape-free step of the trunk, actor and cost estimator. The hidden
    /// state passed in is the previous step's (zeros at episode start).
    pub fn cade_forward(&self, obs: &[f64], prev_action: Option<&[usize]>, hidden: &[f64]) -> Result<ValueBundle, NetError> {
        self.check_obs(obs)?;
        let mut x = obs.to_vec();
        x.extend(self.space.one_hot(prev_action));
        let h = self.trunk.step_eval(&x, hidden);
        let logits = self.actor.eval(&h);
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(AutogradError::NonFinite { op: "actor" }.into());
        }
        Ok(ValueBundle {
            logits,
            cost: self.cost_eval(obs),
            hidden: h,
        })
    }

    pub fn reward_eval(&self, hidden: &[f64], action: &[usize]) -> f64 {
        let mut x = hidden.to_vec();
        x.extend(self.space.one_hot(Some(action)));
        self.reward.eval(&x)[0]
    }

    pub fn value_eval(&self, hidden: &[f64]) -> f64 {
        self.value.eval(hidden)[0]
    }

    pub fn cost_eval(&self, obs: &[f64]) -> f64 {
        kernels::sigmoid(self.cost.eval(obs)[0])
    }

    pub fn sdm_offsets(&self, obs: &[f64], action: &[usize]) -> [f64; 8] {
        let mut x = obs.to_vec();
        x.extend(self.space.one_hot(Some(action)));
        let o = self.sdm.eval(&x);
        let mut out = [0.0; 8];
        out.copy_from_slice(&o);
        out
    }

    /// Trunk inputs for an episode: observation t with action t−1.
    pub fn trunk_inputs(&self, obs: &[Vec<f64>], actions: &[Action]) -> Result<Tensor, NetError> {
        let w = self.obs_dim + self.space.width();
        let mut data = Vec::with_capacity(obs.len() * w);
        for (t, o) in obs.iter().enumerate() {
            self.check_obs(o)?;
            data.extend_from_slice(o);
            let prev = if t == 0 { None } else { Some(actions[t - 1].as_slice()) };
            data.extend(self.space.one_hot(prev));
        }
        Ok(Tensor::new(obs.len(), w, data)?)
    }

    /// Records the trunk and actor over a whole episode.
    pub fn unroll(&self, tape: &mut Tape, obs: &[Vec<f64>], actions: &[Action]) -> Result<Unroll, NetError> {
        let x = self.trunk_inputs(obs, actions)?;
        let x = tape.constant(x)?;
        let hidden = self.trunk.forward(tape, x)?;
        let logits = self.actor.forward(tape, hidden)?;
        Ok(Unroll { hidden, logits })
    }

    /// Reward estimates `T×1` for the taken actions. The hidden states are
    /// detached, so a loss on this output never reaches the trunk.
    pub fn reward_forward(&self, tape: &mut Tape, hidden: Var, actions: &[Action]) -> Result<Var, NetError> {
        let h = tape.detach(hidden)?;
        let a = self.actions_tensor(actions);
        let a = tape.constant(a)?;
        let x = tape.concat(&[h, a], 1)?;
        Ok(self.reward.forward(tape, x)?)
    }

    /// Value estimates `T×1` on detached hidden states.
    pub fn value_forward(&self, tape: &mut Tape, hidden: Var) -> Result<Var, NetError> {
        let h = tape.detach(hidden)?;
        Ok(self.value.forward(tape, h)?)
    }

    /// One-hot rows for a list of actions.
    pub fn actions_tensor(&self, actions: &[Action]) -> Tensor {
        let w = self.space.width();
        let mut data = vec![0.0; actions.len() * w];
        for (row, a) in data.chunks_mut(w).zip(actions) {
            self.space.one_hot_into(Some(a), row);
        }
        Tensor::new(actions.len(), w, data).expect("consistent shape")
    }

    /// Parameters of the policy update: trunk then actor.
    pub fn policy_params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.trunk.params_mut();
        v.extend(self.actor.params_mut());
        v
    }

    pub fn policy_params(&self) -> Vec<&Param> {
        let mut v = self.trunk.params();
        v.extend(self.actor.params());
        v
    }

    fn modules(&self) -> Vec<Vec<&Param>> {
        vec![
            self.trunk.params(),
            self.actor.params(),
            self.reward.params(),
            self.value.params(),
            self.cost.params(),
            self.sdm.params(),
        ]
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.modules()
            .into_iter()
            .flatten()
            .map(|p| (p.name().to_string(), p.value.clone()))
            .collect()
    }

    /// Replaces every parameter value from a checkpoint listing; names and
    /// shapes must match exactly.
    pub fn load_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<(), NetError> {
        let mut all: Vec<&mut Param> = self.trunk.params_mut();
        all.extend(self.actor.params_mut());
        all.extend(self.reward.params_mut());
        all.extend(self.value.params_mut());
        all.extend(self.cost.params_mut());
        all.extend(self.sdm.params_mut());
        if all.len() != tensors.len() {
            return Err(NetError::Checkpoint(format!(
                "expected {} tensors, found {}",
                all.len(),
                tensors.len()
            )));
        }
        for p in all {
            let (_, t) = tensors
                .iter()
                .find(|(n, _)| n == p.name())
                .ok_or_else(|| NetError::Checkpoint(format!("missing tensor {}", p.name())))?;
            if t.shape() != p.value.shape() {
                return Err(NetError::Checkpoint(format!(
                    "{}: shape {:?}, expected {:?}",
                    p.name(),
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.trunk.params_mut() {
            p.zero_grad();
        }
        for m in [&mut self.actor, &mut self.reward, &mut self.value, &mut self.cost, &mut self.sdm] {
            m.params_mut().into_iter().for_each(|p| p.zero_grad());
        }
    }
}

#[cfg(test)]
mod tests;
