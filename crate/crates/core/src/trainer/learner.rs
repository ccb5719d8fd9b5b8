use rand_chacha::ChaCha8Rng;

use crate::advantage::{estimate, normalize, AdvKind, ReturnWindow};
use crate::autograd::{Adam, AutogradError, Gradients, Param, Tape, Tensor};
use crate::cli::Config;
use crate::focops::{cost_advantage, kl_early_stop, policy_loss, FocopsError, LagrangeState, PolicyBatch};
use crate::homography::{sdm_batch_loss, HomographyError};
use crate::nets::{kl_logits, log_prob, mse_loss, CadeNetworks};

use super::{Episode, Stage, TrainError};

/// Losses and statistics of one episode's update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UpdateStats {
    pub loss_pi: f64,
    pub loss_r: f64,
    pub loss_c: f64,
    /// Mean Jaccard loss; NaN when every sample was degenerate.
    pub loss_sdm: f64,
    pub kl: f64,
}

/// Networks plus all optimizer and schedule state of a run.
pub struct Learner {
    pub nets: CadeNetworks,
    pub lagrange: LagrangeState,
    pub window: ReturnWindow,
    policy_opt: Adam,
    reward_opt: Adam,
    value_opt: Adam,
    cost_opt: Adam,
    sdm_opt: Adam,
    cost_rng: ChaCha8Rng,
}

fn apply(opt: &mut Adam, mut params: Vec<&mut Param>, grads: &Gradients) -> Result<(), AutogradError> {
    for p in params.iter_mut() {
        p.zero_grad();
        p.accumulate(grads);
    }
    opt.step(&mut params)
}

fn diverged(stage: Stage) -> TrainError {
    TrainError::Diverged {
        stage,
        iteration: 0,
        snapshot: None,
    }
}

fn finite(stage: Stage, v: f64) -> Result<f64, TrainError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(diverged(stage))
    }
}

/// Tags non-finite autograd failures with the stage they happened in.
fn at<E: Into<TrainError>>(stage: Stage) -> impl Fn(E) -> TrainError {
    move |e| match e.into() {
        TrainError::Autograd(AutogradError::NonFinite { .. })
        | TrainError::Net(crate::nets::NetError::Autograd(AutogradError::NonFinite { .. }))
        | TrainError::Focops(FocopsError::Autograd(AutogradError::NonFinite { .. })) => diverged(stage),
        other => other,
    }
}

impl Learner {
    pub fn new(nets: CadeNetworks, cfg: &Config, cost_rng: ChaCha8Rng) -> Self {
        let t = &cfg.train;
        Self {
            policy_opt: Adam::new(t.policy_optim.clone(), &nets.policy_params()),
            reward_opt: Adam::new(t.model_optim.clone(), &nets.reward.params()),
            value_opt: Adam::new(t.model_optim.clone(), &nets.value.params()),
            cost_opt: Adam::new(t.model_optim.clone(), &nets.cost.params()),
            sdm_opt: Adam::new(t.model_optim.clone(), &nets.sdm.params()),
            lagrange: LagrangeState::new(cfg.lagrange.clone()),
            window: ReturnWindow::new(cfg.adv.window),
            nets,
            cost_rng,
        }
    }

    /// Applies every update stage to one episode, in order.
    pub fn update(&mut self, ep: &Episode, cfg: &Config, observe: &mut dyn FnMut(Stage)) -> Result<UpdateStats, TrainError> {
        let traj = &ep.traj;
        traj.validate()?;
        let t = traj.len();
        let mut stats = UpdateStats::default();

        observe(Stage::Lagrange);
        if cfg.train.lagrangian {
            self.lagrange.update(traj.episode_cost());
        }

        observe(Stage::Sdm);
        stats.loss_sdm = self.update_sdm(ep, cfg)?;

        observe(Stage::CostEstimator);
        stats.loss_c = self.update_cost(ep, cfg)?;

        observe(Stage::RewardAdvantage);
        let current = if cfg.adv.kind == AdvKind::Vtrace {
            self.current_log_probs(ep)?
        } else {
            traj.log_probs.clone()
        };
        let est = estimate(&cfg.adv, traj, &self.window, &current);
        self.window.push(traj.episode_return());
        for &a in &est.advantages {
            finite(Stage::RewardAdvantage, a)?;
        }

        observe(Stage::CostAdvantage);
        let adv_c = if cfg.train.lagrangian {
            let mut out = Vec::with_capacity(t);
            for i in 0..t {
                let c = match cost_advantage(&self.nets, &ep.grids[i], &traj.actions[i], &ep.hidden[i], &cfg.cost_adv, &mut self.cost_rng) {
                    Err(FocopsError::Homography(HomographyError::Singular { .. })) => {
                        let raw = self.nets.cost_eval(ep.grids[i].data());
                        crate::focops::squash_cost(raw, cfg.cost_adv.k, cfg.cost_adv.c_b)
                    }
                    r => r.map_err(at(Stage::CostAdvantage))?,
                };
                out.push(finite(Stage::CostAdvantage, c)?);
            }
            if cfg.cost_adv.normalize {
                normalize(&out)
            } else {
                out
            }
        } else {
            vec![0.0; t]
        };

        let mut tape = Tape::new();
        let un = self.nets.unroll(&mut tape, &traj.obs[..t], &traj.actions).map_err(at(Stage::Actor))?;

        observe(Stage::RewardEstimator);
        stats.loss_r = self.update_estimators(&mut tape, un.hidden, ep, &est.value_targets)?;

        observe(Stage::Actor);
        let (loss_pi, kl) = self.update_actor(tape, un.logits, ep, &est.advantages, &adv_c, cfg)?;
        stats.loss_pi = loss_pi;
        stats.kl = kl;
        Ok(stats)
    }

    fn current_log_probs(&self, ep: &Episode) -> Result<Vec<f64>, TrainError> {
        let traj = &ep.traj;
        let mut h = vec![0.0; self.nets.hidden_dim()];
        let mut out = Vec::with_capacity(traj.len());
        for i in 0..traj.len() {
            let prev = if i == 0 { None } else { Some(traj.actions[i - 1].as_slice()) };
            let b = self.nets.cade_forward(&traj.obs[i], prev, &h).map_err(at(Stage::RewardAdvantage))?;
            out.push(log_prob(&b.logits, &self.nets.space, &traj.actions[i]));
            h = b.hidden;
        }
        Ok(out)
    }

    /// One Jaccard step per in-order minibatch of transitions.
    fn update_sdm(&mut self, ep: &Episode, cfg: &Config) -> Result<f64, TrainError> {
        let traj = &ep.traj;
        let (rows, cols) = (ep.grids[0].rows(), ep.grids[0].cols());
        let samples: Vec<(&[f64], &[usize], &[f64])> = (0..traj.len())
            .map(|i| (traj.obs[i].as_slice(), traj.actions[i].as_slice(), traj.obs[i + 1].as_slice()))
            .collect();
        let (mut total, mut n) = (0.0, 0usize);
        for chunk in samples.chunks(cfg.train.sdm_batch) {
            let mut tape = Tape::new();
            let Some(loss) = sdm_batch_loss(&mut tape, &self.nets, chunk, rows, cols, cfg.train.solve_grad).map_err(at(Stage::Sdm))? else {
                continue;
            };
            let v = finite(Stage::Sdm, tape.value(loss).item())?;
            let grads = tape.backward(loss).map_err(at(Stage::Sdm))?;
            apply(&mut self.sdm_opt, self.nets.sdm.params_mut(), &grads).map_err(at(Stage::Sdm))?;
            total += v;
            n += 1;
        }
        Ok(if n == 0 { f64::NAN } else { total / n as f64 })
    }

    /// MSE of the cost estimator on `(obs_{t+1}, c_t)` pairs.
    fn update_cost(&mut self, ep: &Episode, cfg: &Config) -> Result<f64, TrainError> {
        let traj = &ep.traj;
        let d = self.nets.obs_dim;
        let idx: Vec<usize> = (0..traj.len()).collect();
        let (mut total, mut n) = (0.0, 0usize);
        for chunk in idx.chunks(cfg.train.cost_batch) {
            let mut x = Vec::with_capacity(chunk.len() * d);
            let mut y = Vec::with_capacity(chunk.len());
            for &i in chunk {
                x.extend_from_slice(&traj.obs[i + 1]);
                y.push(traj.costs[i]);
            }
            let mut tape = Tape::new();
            let run = |tape: &mut Tape| -> Result<_, AutogradError> {
                let xv = tape.constant(Tensor::new(chunk.len(), d, x)?)?;
                let yv = tape.constant(Tensor::new(chunk.len(), 1, y)?)?;
                let z = self.nets.cost.forward(tape, xv)?;
                let p = tape.sigmoid(z)?;
                mse_loss(tape, p, yv)
            };
            let loss = run(&mut tape).map_err(at(Stage::CostEstimator))?;
            let v = finite(Stage::CostEstimator, tape.value(loss).item())?;
            let grads = tape.backward(loss).map_err(at(Stage::CostEstimator))?;
            apply(&mut self.cost_opt, self.nets.cost.params_mut(), &grads).map_err(at(Stage::CostEstimator))?;
            total += v;
            n += 1;
        }
        Ok(total / n.max(1) as f64)
    }

    /// Reward-estimator MSE on actual rewards and critic MSE on the value
    /// targets, both on detached trunk states. Returns the reward loss.
    fn update_estimators(&mut self, tape: &mut Tape, hidden: crate::autograd::Var, ep: &Episode, targets: &[f64]) -> Result<f64, TrainError> {
        let traj = &ep.traj;
        let t = traj.len();
        let stage = Stage::RewardEstimator;
        let pred_r = self.nets.reward_forward(tape, hidden, &traj.actions).map_err(at(stage))?;
        let pred_v = self.nets.value_forward(tape, hidden).map_err(at(stage))?;
        let build = |tape: &mut Tape| -> Result<_, AutogradError> {
            let r = tape.constant(Tensor::new(t, 1, traj.rewards.clone())?)?;
            let v = tape.constant(Tensor::new(t, 1, targets.to_vec())?)?;
            let lr = mse_loss(tape, pred_r, r)?;
            let lv = mse_loss(tape, pred_v, v)?;
            let both = tape.add(lr, lv)?;
            Ok((lr, both))
        };
        let (lr, both) = build(tape).map_err(at(stage))?;
        let loss_r = finite(stage, tape.value(lr).item())?;
        finite(stage, tape.value(both).item())?;
        let grads = tape.backward(both).map_err(at(stage))?;
        apply(&mut self.reward_opt, self.nets.reward.params_mut(), &grads).map_err(at(stage))?;
        apply(&mut self.value_opt, self.nets.value.params_mut(), &grads).map_err(at(stage))?;
        Ok(loss_r)
    }

    /// Actor and trunk epochs on the masked surrogate. The first epoch reuses
    /// the tape recorded for the estimators; later epochs re-unroll and stop
    /// once the mean KL to the snapshot exceeds the limit.
    fn update_actor(
        &mut self,
        mut tape: Tape,
        mut logits: crate::autograd::Var,
        ep: &Episode,
        adv_r: &[f64],
        adv_c: &[f64],
        cfg: &Config,
    ) -> Result<(f64, f64), TrainError> {
        let traj = &ep.traj;
        let t = traj.len();
        let stage = Stage::Actor;
        let batch = PolicyBatch {
            actions: &traj.actions,
            old_logits: &traj.logits,
            old_log_probs: &traj.log_probs,
            adv_r,
            adv_c,
        };
        let (mut loss_pi, mut kl) = (0.0, 0.0);
        for epoch in 0..cfg.train.actor_epochs {
            if epoch > 0 {
                tape = Tape::new();
                logits = self.nets.unroll(&mut tape, &traj.obs[..t], &traj.actions).map_err(at(stage))?.logits;
            }
            let out = policy_loss(&mut tape, logits, &self.nets.space, &batch, self.lagrange.beta, &cfg.trust).map_err(at(stage))?;
            kl = out.mean_kl;
            if epoch > 0 && kl_early_stop(kl, cfg.trust.kl_stop) {
                break;
            }
            loss_pi = finite(stage, tape.value(out.loss).item())?;
            let grads = tape.backward(out.loss).map_err(at(stage))?;
            apply(&mut self.policy_opt, self.nets.policy_params_mut(), &grads).map_err(at(stage))?;
        }
        if cfg.train.actor_epochs > 0 {
            kl = self.kl_to_snapshot(ep)?;
        }
        Ok((loss_pi, kl))
    }

    /// Mean per-step KL of the current policy to the behaviour logits.
    fn kl_to_snapshot(&self, ep: &Episode) -> Result<f64, TrainError> {
        let traj = &ep.traj;
        let mut h = vec![0.0; self.nets.hidden_dim()];
        let mut total = 0.0;
        for i in 0..traj.len() {
            let prev = if i == 0 { None } else { Some(traj.actions[i - 1].as_slice()) };
            let b = self.nets.cade_forward(&traj.obs[i], prev, &h).map_err(at(Stage::Actor))?;
            total += kl_logits(&b.logits, &traj.logits[i], &self.nets.space);
            h = b.hidden;
        }
        Ok(total / traj.len().max(1) as f64)
    }
}
