//! Vision-dynamics study: one-step training of the homography model, a
//! dense MLP predictor and the copy-the-input baseline, then recursive
//! multi-step evaluation with IoU and L1 curves.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Adam, AdamConfig, AutogradError, Tape, Tensor};
use crate::envs::{make_env, EnvConfig, EnvError, EnvKind, Level};
use crate::homography::{sdm_batch_loss, sdm_predict, HomographyError, PatchGrid, SolveGrad};
use crate::nets::{Action, ActionSpace, CadeNetworks, Mlp, NetConfig};
use crate::trainer::{stream, Stream};

#[derive(Debug, Error)]
pub enum DynError {
    #[error("action coverage incomplete; never taken: {}", missing.join(", "))]
    Coverage { missing: Vec<String> },
    #[error("dataset has {found} transitions, {needed} needed")]
    TooSmall { needed: usize, found: usize },
    #[error("empty training split")]
    Empty,
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Homography(#[from] HomographyError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum DynModelKind {
    Sdm,
    SdmMlp,
    Baseline,
}

impl DynModelKind {
    pub const ALL: [DynModelKind; 3] = [DynModelKind::Sdm, DynModelKind::SdmMlp, DynModelKind::Baseline];

    pub fn as_str(self) -> &'static str {
        match self {
            DynModelKind::Sdm => "sdm",
            DynModelKind::SdmMlp => "sdm-mlp",
            DynModelKind::Baseline => "baseline",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynConfig {
    pub train_size: usize,
    pub test_size: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub horizon: usize,
    pub models: Vec<DynModelKind>,
    /// Hidden widths of the dense predictor.
    pub mlp_hidden: Vec<usize>,
    pub solve_grad: SolveGrad,
}

impl Default for DynConfig {
    fn default() -> Self {
        Self {
            train_size: 1720,
            test_size: 492,
            epochs: 30,
            batch: 64,
            lr: 1e-3,
            horizon: 10,
            models: DynModelKind::ALL.to_vec(),
            mlp_hidden: vec![64, 64],
            solve_grad: SolveGrad::Analytic,
        }
    }
}

/// Consecutive observations of one episode and the actions between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// `len() + 1` observations.
    pub obs: Vec<PatchGrid>,
    pub actions: Vec<Action>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Transitions `t..t + n` as a new segment.
    pub fn slice(&self, t: usize, n: usize) -> Segment {
        Segment {
            obs: self.obs[t..=t + n].to_vec(),
            actions: self.actions[t..t + n].to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDataset {
    pub env: EnvKind,
    pub level: Level,
    pub space: ActionSpace,
    pub rows: usize,
    pub cols: usize,
    pub train: Vec<Segment>,
    pub test: Vec<Segment>,
}

/// Borrowed `(obs, action, next_obs)` triple.
pub type Triple<'a> = (&'a [f64], &'a [usize], &'a [f64]);

pub fn transitions(segments: &[Segment]) -> Vec<Triple<'_>> {
    segments
        .iter()
        .flat_map(|s| (0..s.len()).map(move |t| (s.obs[t].data(), s.actions[t].as_slice(), s.obs[t + 1].data())))
        .collect()
}

pub fn count(segments: &[Segment]) -> usize {
    segments.iter().map(Segment::len).sum()
}

/// Episodes under a uniform random policy.
pub fn collect_episodes<R: Rng>(kind: EnvKind, level: Level, env_cfg: &EnvConfig, episodes: usize, rng: &mut R) -> Result<Vec<Segment>, DynError> {
    let mut env = make_env(kind, level, env_cfg);
    let space = env.action_space();
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let mut obs = vec![env.reset(rng.random())];
        let mut actions = Vec::new();
        loop {
            let a: Action = space.branches().iter().map(|&n| rng.random_range(0..n)).collect();
            let step = env.step(&a)?;
            let done = step.terminal();
            obs.push(step.obs);
            actions.push(a);
            if done {
                break;
            }
        }
        out.push(Segment { obs, actions });
    }
    Ok(out)
}

/// Branch values never taken in `segments`, as `branch:value` labels.
pub fn missing_actions(space: &ActionSpace, segments: &[Segment]) -> Vec<String> {
    let mut seen: Vec<Vec<bool>> = space.branches().iter().map(|&n| vec![false; n]).collect();
    for a in segments.iter().flat_map(|s| &s.actions) {
        for (b, &v) in a.iter().enumerate() {
            seen[b][v] = true;
        }
    }
    let mut missing = Vec::new();
    for (b, vals) in seen.iter().enumerate() {
        for (v, &ok) in vals.iter().enumerate() {
            if !ok {
                missing.push(format!("{b}:{v}"));
            }
        }
    }
    missing
}

/// Cuts the concatenated episodes after `train` transitions; the next
/// `test` transitions form the held-out split.
pub fn split(segments: Vec<Segment>, train: usize, test: usize) -> Result<(Vec<Segment>, Vec<Segment>), DynError> {
    let found = count(&segments);
    if found < train + test {
        return Err(DynError::TooSmall {
            needed: train + test,
            found,
        });
    }
    let (mut tr, mut te) = (Vec::new(), Vec::new());
    let (mut need_tr, mut need_te) = (train, test);
    for seg in segments {
        let mut start = 0;
        if need_tr > 0 {
            let n = need_tr.min(seg.len());
            tr.push(seg.slice(0, n));
            need_tr -= n;
            start = n;
        }
        if need_tr == 0 && need_te > 0 && start < seg.len() {
            let n = need_te.min(seg.len() - start);
            te.push(seg.slice(start, n));
            need_te -= n;
        }
        if need_te == 0 && need_tr == 0 {
            break;
        }
    }
    Ok((tr, te))
}

/// Random-policy dataset of exactly `cfg.train_size + cfg.test_size`
/// transitions; fails when some action value never occurs in training.
pub fn collect_dataset(kind: EnvKind, level: Level, env_cfg: &EnvConfig, cfg: &DynConfig, seed: u64) -> Result<TransitionDataset, DynError> {
    let mut rng = stream(seed, Stream::Dataset);
    let env = make_env(kind, level, env_cfg);
    let space = env.action_space();
    let (rows, cols) = env.obs_shape();
    let mut segments = Vec::new();
    while count(&segments) < cfg.train_size + cfg.test_size {
        segments.extend(collect_episodes(kind, level, env_cfg, 1, &mut rng)?);
    }
    let (train, test) = split(segments, cfg.train_size, cfg.test_size)?;
    let missing = missing_actions(&space, &train);
    if !missing.is_empty() {
        return Err(DynError::Coverage { missing });
    }
    Ok(TransitionDataset {
        env: kind,
        level,
        space,
        rows,
        cols,
        train,
        test,
    })
}

/// A trained one-step predictor.
pub enum DynModel {
    Sdm(Box<CadeNetworks>),
    SdmMlp { mlp: Mlp, space: ActionSpace },
    Baseline,
}

impl DynModel {
    pub fn kind(&self) -> DynModelKind {
        match self {
            DynModel::Sdm(_) => DynModelKind::Sdm,
            DynModel::SdmMlp { .. } => DynModelKind::SdmMlp,
            DynModel::Baseline => DynModelKind::Baseline,
        }
    }

    /// One-step prediction. A degenerate homography leaves the input as is.
    pub fn predict(&self, obs: &PatchGrid, action: &[usize]) -> PatchGrid {
        match self {
            DynModel::Sdm(nets) => sdm_predict(obs, action, nets).unwrap_or_else(|_| obs.clone()),
            DynModel::SdmMlp { mlp, space } => {
                let mut x = obs.data().to_vec();
                x.extend(space.one_hot(Some(action)));
                let p = mlp.eval(&x).into_iter().map(crate::autograd::kernels::sigmoid).collect();
                PatchGrid::new(obs.rows(), obs.cols(), p).expect("matching shape")
            }
            DynModel::Baseline => obs.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trained {
    /// Mean minibatch loss per epoch; empty for the baseline.
    pub epoch_losses: Vec<f64>,
}

fn inputs(batch: &[Triple], space: &ActionSpace, d: usize) -> Result<Tensor, AutogradError> {
    let w = d + space.width();
    let mut x = Vec::with_capacity(batch.len() * w);
    for (obs, a, _) in batch {
        x.extend_from_slice(obs);
        x.extend(space.one_hot(Some(a)));
    }
    Tensor::new(batch.len(), w, x)
}

/// Mean elementwise binary cross-entropy of `sigmoid(logits)` against
/// `target`.
fn bce(tape: &mut Tape, logits: crate::autograd::Var, target: Tensor) -> Result<crate::autograd::Var, AutogradError> {
    let eps = 1e-7;
    let y = tape.constant(target.clone())?;
    let one_minus = Tensor::new(target.rows(), target.cols(), target.data().iter().map(|v| 1.0 - v).collect())?;
    let ny = tape.constant(one_minus)?;
    let p = tape.sigmoid(logits)?;
    let p = tape.clamp(p, eps, 1.0 - eps)?;
    let lp = tape.ln(p)?;
    let q = tape.neg(p)?;
    let q = tape.add_scalar(q, 1.0)?;
    let lq = tape.ln(q)?;
    let a = tape.mul(y, lp)?;
    let b = tape.mul(ny, lq)?;
    let s = tape.add(a, b)?;
    let m = tape.mean(s)?;
    tape.neg(m)
}

/// One-step training with shuffled minibatches.
pub fn train_dyn(kind: DynModelKind, data: &TransitionDataset, cfg: &DynConfig, net_cfg: &NetConfig, seed: u64) -> Result<(DynModel, Trained), DynError> {
    let triples = transitions(&data.train);
    if triples.is_empty() {
        return Err(DynError::Empty);
    }
    let d = data.rows * data.cols;
    let mut init = stream(seed, Stream::DynInit);
    let mut shuffle = stream(seed, Stream::DynShuffle);
    let opt_cfg = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    match kind {
        DynModelKind::Baseline => Ok((DynModel::Baseline, Trained { epoch_losses })),
        DynModelKind::Sdm => {
            let mut nets = CadeNetworks::new(&mut init, d, data.space.clone(), net_cfg);
            let mut opt = Adam::new(opt_cfg, &nets.sdm.params());
            for _ in 0..cfg.epochs {
                order.shuffle(&mut shuffle);
                let (mut total, mut n) = (0.0, 0);
                for idx in order.chunks(cfg.batch) {
                    let batch: Vec<Triple> = idx.iter().map(|&i| triples[i]).collect();
                    let mut tape = Tape::new();
                    let Some(loss) = sdm_batch_loss(&mut tape, &nets, &batch, data.rows, data.cols, cfg.solve_grad)? else {
                        continue;
                    };
                    total += tape.value(loss).item();
                    n += 1;
                    let grads = tape.backward(loss)?;
                    let mut params = nets.sdm.params_mut();
                    for p in params.iter_mut() {
                        p.zero_grad();
                        p.accumulate(&grads);
                    }
                    opt.step(&mut params)?;
                }
                epoch_losses.push(total / f64::from(n.max(1)));
            }
            Ok((DynModel::Sdm(Box::new(nets)), Trained { epoch_losses }))
        }
        DynModelKind::SdmMlp => {
            let mut sizes = vec![d + data.space.width()];
            sizes.extend(&cfg.mlp_hidden);
            sizes.push(d);
            let mut mlp = Mlp::new(&mut init, "sdm_mlp", &sizes, 1.0);
            let mut opt = Adam::new(opt_cfg, &mlp.params());
            for _ in 0..cfg.epochs {
                order.shuffle(&mut shuffle);
                let (mut total, mut n) = (0.0, 0);
                for idx in order.chunks(cfg.batch) {
                    let batch: Vec<Triple> = idx.iter().map(|&i| triples[i]).collect();
                    let target = Tensor::new(batch.len(), d, batch.iter().flat_map(|t| t.2.iter().copied()).collect())?;
                    let mut tape = Tape::new();
                    let x = tape.constant(inputs(&batch, &data.space, d)?)?;
                    let z = mlp.forward(&mut tape, x)?;
                    let loss = bce(&mut tape, z, target)?;
                    total += tape.value(loss).item();
                    n += 1;
                    let grads = tape.backward(loss)?;
                    let mut params = mlp.params_mut();
                    for p in params.iter_mut() {
                        p.zero_grad();
                        p.accumulate(&grads);
                    }
                    opt.step(&mut params)?;
                }
                epoch_losses.push(total / f64::from(n.max(1)));
            }
            Ok((
                DynModel::SdmMlp {
                    mlp,
                    space: data.space.clone(),
                },
                Trained { epoch_losses },
            ))
        }
    }
}

/// Patch-level IoU of the masks thresholded at 0.5; two empty masks agree
/// perfectly.
pub fn iou(pred: &PatchGrid, truth: &PatchGrid) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, t) in pred.data().iter().zip(truth.data()) {
        let (p, t) = (*p > 0.5, *t > 0.5);
        inter += usize::from(p && t);
        union += usize::from(p || t);
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean absolute per-patch difference.
pub fn l1(pred: &PatchGrid, truth: &PatchGrid) -> f64 {
    let n = pred.data().len().max(1) as f64;
    pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t).abs()).sum::<f64>() / n
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub model: DynModelKind,
    pub step: usize,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub l1_mean: f64,
    pub l1_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutReport {
    pub steps: Vec<StepMetrics>,
    pub windows: usize,
    /// Test segments too short for a single window.
    pub skipped: usize,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

/// Recursive `horizon`-step prediction from every start index of every
/// test segment, fed only its own predictions after the first step.
pub fn rollout_eval(model: &DynModel, test: &[Segment], horizon: usize) -> RolloutReport {
    let mut ious = vec![Vec::new(); horizon];
    let mut l1s = vec![Vec::new(); horizon];
    let (mut windows, mut skipped) = (0, 0);
    for seg in test {
        if seg.len() < horizon {
            skipped += 1;
            continue;
        }
        for s in 0..=seg.len() - horizon {
            windows += 1;
            let mut pred = seg.obs[s].clone();
            for k in 0..horizon {
                pred = model.predict(&pred, &seg.actions[s + k]);
                let truth = &seg.obs[s + k + 1];
                ious[k].push(iou(&pred, truth));
                l1s[k].push(l1(&pred, truth));
            }
        }
    }
    let steps = (0..horizon)
        .map(|k| {
            let (iou_mean, iou_std) = mean_std(&ious[k]);
            let (l1_mean, l1_std) = mean_std(&l1s[k]);
            StepMetrics {
                model: model.kind(),
                step: k + 1,
                iou_mean,
                iou_std,
                l1_mean,
                l1_std,
            }
        })
        .collect();
    RolloutReport { steps, windows, skipped }
}

pub const DYN_METRICS_FILE: &str = "dyn_metrics.csv";

pub fn write_dyn_metrics(path: &Path, rows: &[StepMetrics]) -> Result<(), DynError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Collects the dataset, trains each requested model and evaluates it.
pub fn run_bench(kind: EnvKind, level: Level, env_cfg: &EnvConfig, cfg: &DynConfig, net_cfg: &NetConfig, seed: u64) -> Result<Vec<(RolloutReport, Trained)>, DynError> {
    let data = collect_dataset(kind, level, env_cfg, cfg, seed)?;
    let mut out = Vec::with_capacity(cfg.models.len());
    for &m in &cfg.models {
        let (model, trained) = train_dyn(m, &data, cfg, net_cfg, seed)?;
        out.push((rollout_eval(&model, &data.test, cfg.horizon), trained));
    }
    Ok(out)
}
