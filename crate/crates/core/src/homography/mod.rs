//! Semantic dynamics geometry: four-point homographies, differentiable
//! patch-grid warping and the soft Jaccard loss.
//!
//! Coordinates are `(u, v)` = (row, column) with cell centers on integers
//! and the origin at the top-left cell. A homography acts on `[u, v, 1]`.

mod grid;
mod solve;
mod warp;

pub use grid::PatchGrid;
pub use solve::{corners, solve_homography, solve_on_tape, Homography, SolveGrad};
pub use warp::{warp, warp_on_tape, VACANT};

use thiserror::Error;

use crate::autograd::{AutogradError, Tape, Tensor, Var};
use crate::nets::{Action, CadeNetworks};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HomographyError {
    #[error("degenerate corner quadrilateral (condition estimate {condition:e})")]
    Singular { condition: f64 },
    #[error("non-finite corner offsets")]
    NonFinite,
    #[error("grid of {expected:?} cannot hold {found} values")]
    Dimension { expected: (usize, usize), found: usize },
    #[error("grid value {0} outside [0, 1]")]
    Range(f64),
    #[error("pgm: {0}")]
    Pgm(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

/// `1 − Σpg / (Σp + Σg − Σpg)`; zero when both grids are empty.
pub fn jaccard_loss(pred: &PatchGrid, truth: &PatchGrid) -> Result<f64, HomographyError> {
    if pred.rows() != truth.rows() || pred.cols() != truth.cols() {
        return Err(HomographyError::Dimension {
            expected: (truth.rows(), truth.cols()),
            found: pred.data().len(),
        });
    }
    Ok(jaccard_values(pred.data(), truth.data()))
}

fn jaccard_values(p: &[f64], g: &[f64]) -> f64 {
    let i: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let u = p.iter().sum::<f64>() + g.iter().sum::<f64>() - i;
    if u <= 0.0 {
        0.0
    } else {
        1.0 - i / u
    }
}

/// Soft Jaccard loss on a tape; `truth` is a constant of the same shape.
pub fn jaccard_on_tape(tape: &mut Tape, pred: Var, truth: &[f64]) -> Result<Var, AutogradError> {
    let shape = tape.value(pred).shape();
    let g = tape.constant(Tensor::new(shape[0], shape[1], truth.to_vec())?)?;
    let pg = tape.mul(pred, g)?;
    let inter = tape.sum(pg)?;
    let ps = tape.sum(pred)?;
    let union_minus_g = tape.sub(ps, inter)?;
    let union = tape.add_scalar(union_minus_g, truth.iter().sum())?;
    if tape.value(union).item() <= 0.0 {
        return tape.scale(inter, 0.0);
    }
    let iou = tape.div(inter, union)?;
    let neg = tape.neg(iou)?;
    tape.add_scalar(neg, 1.0)
}

/// One-step SDM prediction: warp `obs` by the homography built from the
/// network's corner offsets for `action`.
pub fn sdm_predict(obs: &PatchGrid, action: &[usize], nets: &CadeNetworks) -> Result<PatchGrid, HomographyError> {
    let offsets = nets.sdm_offsets(obs.data(), action);
    let h = solve_homography(&offsets, obs.rows(), obs.cols())?;
    warp(obs, &h)
}

/// Feeds predictions back in for every action in turn.
pub fn sdm_rollout(obs: &PatchGrid, actions: &[Action], nets: &CadeNetworks) -> Result<Vec<PatchGrid>, HomographyError> {
    let mut out = Vec::with_capacity(actions.len());
    let mut cur = obs.clone();
    for a in actions {
        cur = sdm_predict(&cur, a, nets)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Mean soft Jaccard loss of one-step SDM predictions over a batch of
/// `(obs, action, next_obs)` triples, recorded on `tape`.
///
/// Samples whose predicted corners are degenerate are left out of the mean;
/// `None` means every sample was degenerate.
pub fn sdm_batch_loss(
    tape: &mut Tape,
    nets: &CadeNetworks,
    batch: &[(&[f64], &[usize], &[f64])],
    rows: usize,
    cols: usize,
    mode: SolveGrad,
) -> Result<Option<Var>, HomographyError> {
    let n = rows * cols;
    let width = n + nets.space.width();
    let mut x = Vec::with_capacity(batch.len() * width);
    for (obs, a, _) in batch {
        x.extend_from_slice(obs);
        x.extend(nets.space.one_hot(Some(a)));
    }
    let xv = tape.constant(Tensor::new(batch.len(), width, x)?)?;
    let offsets = nets.sdm.forward(tape, xv)?;
    let mut losses = Vec::with_capacity(batch.len());
    for (k, (obs, _, next)) in batch.iter().enumerate() {
        let o = tape.slice(offsets, 0, k, 1)?;
        let h = match solve_on_tape(tape, o, rows, cols, mode) {
            Err(HomographyError::Singular { .. }) => continue,
            r => r?,
        };
        let src = tape.constant(Tensor::row(obs.to_vec()))?;
        let pred = match warp_on_tape(tape, src, h, rows, cols) {
            Err(HomographyError::Singular { .. }) => continue,
            r => r?,
        };
        losses.push(jaccard_on_tape(tape, pred, next)?);
    }
    if losses.is_empty() {
        return Ok(None);
    }
    let all = tape.concat(&losses, 0)?;
    Ok(Some(tape.mean(all)?))
}

#[cfg(test)]
mod tests;
