//! Constrained policy update: first-order surrogate with KL masking, the
//! Lagrange multiplier and the model-based cost advantage.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Tensor, Var};
use crate::homography::{sdm_predict, HomographyError, PatchGrid};
use crate::nets::{log_probs, sample_action, Action, ActionSpace, CadeNetworks, NetError};

#[derive(Debug, Error)]
pub enum FocopsError {
    #[error("{field} has {found} entries for {expected} steps")]
    Length { field: &'static str, expected: usize, found: usize },
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Homography(#[from] HomographyError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LagrangeConfig {
    pub lr: f64,
    /// Episodic cost budget `d`.
    pub budget: f64,
    pub beta_max: f64,
    pub beta_init: f64,
}

impl Default for LagrangeConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            budget: 1.0,
            beta_max: 2.0,
            beta_init: 0.0,
        }
    }
}

/// Multiplier `β ∈ [0, β̄]` on the cost advantage.
#[derive(Clone, Debug, PartialEq)]
pub struct LagrangeState {
    pub beta: f64,
    pub cfg: LagrangeConfig,
}

impl LagrangeState {
    pub fn new(cfg: LagrangeConfig) -> Self {
        Self {
            beta: cfg.beta_init.clamp(0.0, cfg.beta_max),
            cfg,
        }
    }

    /// `β ← min(β̄, max(0, β − l_β (d − J_C)))`.
    pub fn update(&mut self, episodic_cost: f64) {
        let b = self.beta - self.cfg.lr * (self.cfg.budget - episodic_cost);
        self.beta = b.max(0.0).min(self.cfg.beta_max);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrustRegionConfig {
    /// Steps whose KL to the snapshot policy exceeds this are masked.
    pub kl_mask: f64,
    /// Actor updates stop once the mean KL exceeds this.
    pub kl_stop: f64,
    /// Weight `1/α` of the importance-weighted advantage term.
    pub inv_alpha: f64,
}

impl Default for TrustRegionConfig {
    fn default() -> Self {
        Self {
            kl_mask: 0.02,
            kl_stop: 0.02,
            inv_alpha: 1.0 / 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostAdvConfig {
    pub horizon: usize,
    pub gamma: f64,
    pub k: f64,
    pub c_b: f64,
    pub normalize: bool,
}

impl Default for CostAdvConfig {
    fn default() -> Self {
        Self {
            horizon: 1,
            gamma: 0.99,
            k: 8.0,
            c_b: 0.5,
            normalize: false,
        }
    }
}

/// `1 / (1 + e^{−k(Ā − c_b)})`.
pub fn squash_cost(raw: f64, k: f64, c_b: f64) -> f64 {
    1.0 / (1.0 + (-k * (raw - c_b)).exp())
}

/// Discounted predicted cost of an imagined rollout that starts by taking
/// `action` from `obs`; later actions are sampled from the policy.
///
/// `hidden` is the trunk state after consuming `obs`.
pub fn imagined_cost<R: Rng>(
    nets: &CadeNetworks,
    obs: &PatchGrid,
    action: &[usize],
    hidden: &[f64],
    horizon: usize,
    gamma: f64,
    rng: &mut R,
) -> Result<f64, FocopsError> {
    let mut s = sdm_predict(obs, action, nets)?;
    let mut total = nets.cost_eval(s.data());
    let mut h = hidden.to_vec();
    let mut a = action.to_vec();
    let mut discount = 1.0;
    for _ in 1..horizon {
        let step = nets.cade_forward(s.data(), Some(&a), &h)?;
        let (next, _) = sample_action(&step.logits, &nets.space, rng)?;
        s = sdm_predict(&s, &next, nets)?;
        discount *= gamma;
        total += discount * nets.cost_eval(s.data());
        h = step.hidden;
        a = next;
    }
    Ok(total)
}

/// Squashed cost advantage of one step.
pub fn cost_advantage<R: Rng>(
    nets: &CadeNetworks,
    obs: &PatchGrid,
    action: &[usize],
    hidden: &[f64],
    cfg: &CostAdvConfig,
    rng: &mut R,
) -> Result<f64, FocopsError> {
    let raw = imagined_cost(nets, obs, action, hidden, cfg.horizon, cfg.gamma, rng)?;
    Ok(squash_cost(raw, cfg.k, cfg.c_b))
}

/// Per-step inputs of the policy loss, all recorded against the snapshot
/// policy `π_k`.
pub struct PolicyBatch<'a> {
    pub actions: &'a [Action],
    pub old_logits: &'a [Vec<f64>],
    pub old_log_probs: &'a [f64],
    pub adv_r: &'a [f64],
    pub adv_c: &'a [f64],
}

pub struct PolicyLoss {
    pub loss: Var,
    /// Mean per-step `KL(π_θ‖π_k)` over all steps.
    pub mean_kl: f64,
    pub masked: usize,
}

/// Mean over unmasked steps of
/// `KL(π_θ‖π_k) − (1/α)·(π_θ(a)/π_k(a))·(A_R − β A_C)`.
///
/// `logits` is the `T×width` actor output for the episode.
pub fn policy_loss(
    tape: &mut Tape,
    logits: Var,
    space: &ActionSpace,
    batch: &PolicyBatch,
    beta: f64,
    trust: &TrustRegionConfig,
) -> Result<PolicyLoss, FocopsError> {
    let t = tape.value(logits).rows();
    let w = space.width();
    for (field, found) in [
        ("actions", batch.actions.len()),
        ("old_logits", batch.old_logits.len()),
        ("old_log_probs", batch.old_log_probs.len()),
        ("adv_r", batch.adv_r.len()),
        ("adv_c", batch.adv_c.len()),
    ] {
        if found != t {
            return Err(FocopsError::Length { field, expected: t, found });
        }
    }
    let mut onehot = vec![0.0; t * w];
    let mut old_lp = Vec::with_capacity(t * w);
    for i in 0..t {
        space.one_hot_into(Some(&batch.actions[i]), &mut onehot[i * w..(i + 1) * w]);
        old_lp.extend(log_probs(&batch.old_logits[i], space));
    }
    let onehot = tape.constant(Tensor::new(t, w, onehot)?)?;
    let old_lp = tape.constant(Tensor::new(t, w, old_lp)?)?;
    let behaviour = tape.constant(Tensor::new(t, 1, batch.old_log_probs.to_vec())?)?;
    let adv: Vec<f64> = (0..t).map(|i| batch.adv_r[i] - beta * batch.adv_c[i]).collect();
    let adv = tape.constant(Tensor::new(t, 1, adv)?)?;

    let lp = tape.log_softmax(logits, space.branches())?;
    let p = tape.softmax(logits, space.branches())?;
    let diff = tape.sub(lp, old_lp)?;
    let pk = tape.mul(p, diff)?;
    let kl = tape.sum_rows(pk)?;

    let picked = tape.mul(lp, onehot)?;
    let chosen = tape.sum_rows(picked)?;
    let log_ratio = tape.sub(chosen, behaviour)?;
    let ratio = tape.exp(log_ratio)?;
    let surr = tape.mul(ratio, adv)?;
    let surr = tape.scale(surr, trust.inv_alpha)?;
    let per_step = tape.sub(kl, surr)?;

    let kl_values = tape.value(kl).data().to_vec();
    let mask: Vec<f64> = kl_values.iter().map(|&k| if k > trust.kl_mask { 0.0 } else { 1.0 }).collect();
    let kept = mask.iter().sum::<f64>();
    let mask = tape.constant(Tensor::new(t, 1, mask)?)?;
    let masked_steps = tape.mul(per_step, mask)?;
    let total = tape.sum(masked_steps)?;
    let loss = tape.scale(total, 1.0 / kept.max(1.0))?;
    Ok(PolicyLoss {
        loss,
        mean_kl: kl_values.iter().sum::<f64>() / t.max(1) as f64,
        masked: t - kept as usize,
    })
}

/// Strict `kl > δ̄`.
pub fn kl_early_stop(kl: f64, limit: f64) -> bool {
    kl > limit
}
