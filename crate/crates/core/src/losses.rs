//! Training objectives: decayed L1 over all iterations, visibility
//! cross-entropy, and score-map cross-entropy toward the true cell.
//!
//! Reductions are means, so magnitudes do not depend on batch size or window.

use serde::{Deserialize, Serialize};

use crate::model::ScorePatches;
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use crate::Scalar;

pub const VIS_EPS: f64 = 1e-6;

/// `gamma^(K - k)` for `k = 1..=K`.
///
/// `gamma` is taken as the shortest decimal that prints back to it, and each
/// power of that decimal is rounded once, so `0.8^2` is `0.64` rather than
/// `0.6400000000000001`. Powers too large for exact integer arithmetic fall
/// back to `powi`.
pub fn iteration_weights(iters: usize, gamma: f64) -> Vec<f64> {
    (1..=iters).map(|k| decimal_pow(gamma, (iters - k) as u32)).collect()
}

fn decimal_pow(base: f64, exp: u32) -> f64 {
    const EXACT: u128 = 1 << 53;
    let text = base.to_string();
    let (int, frac) = text.split_once('.').unwrap_or((&text, ""));
    let exact = (|| {
        let num: u128 = format!("{int}{frac}").parse().ok()?;
        let den = 10u128.checked_pow(frac.len() as u32)?;
        let (n, d) = (num.checked_pow(exp)?, den.checked_pow(exp)?);
        (n <= EXACT && d <= EXACT).then(|| n as f64 / d as f64)
    })();
    exact.unwrap_or_else(|| base.powi(exp as i32))
}

/// `sum_k gamma^(K-k) * mean |X^k - X*|`, over every timestep whether the
/// target is visible or not.
pub fn loss_main<S: Scalar>(tape: &mut Tape<S>, trajectories: &[Var], target: Var, gamma: f64) -> Result<Var> {
    if trajectories.is_empty() {
        return Err(TensorError::Invalid { op: "loss_main", msg: "no iterations".into() });
    }
    let weights = iteration_weights(trajectories.len(), gamma);
    let mut total: Option<Var> = None;
    for (&x, &w) in trajectories.iter().zip(&weights) {
        let diff = tape.sub(x, target)?;
        let diff = tape.abs(diff)?;
        let term = tape.mean_all(diff)?;
        let term = tape.scale(term, S::lit(w))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Mean binary cross-entropy of visibility probabilities against 0/1 labels.
pub fn loss_visibility<S: Scalar>(tape: &mut Tape<S>, visibility: Var, labels: &[S]) -> Result<Var> {
    tape.bce_mean(visibility, labels, VIS_EPS)
}

/// The score-supervision term of one (iteration, target, timestep) cell, or
/// `None` when the target is invisible or its true position falls outside
/// the patch footprint.
pub fn score_target(center: [f64; 2], truth: [f64; 2], visible: bool, radius: usize, stride: usize) -> Option<usize> {
    if !visible {
        return None;
    }
    let r = radius as f64;
    let dx = (truth[0] - center[0]) / stride as f64;
    let dy = (truth[1] - center[1]) / stride as f64;
    if dx.abs() > r || dy.abs() > r {
        return None;
    }
    let p = 2 * radius + 1;
    let ix = (dx.round() + r) as usize;
    let iy = (dy.round() + r) as usize;
    Some(iy * p + ix)
}

/// Score loss plus how many cells contributed and how many visible cells
/// were skipped because the truth lay outside the patch.
pub struct ScoreLoss {
    pub loss: Var,
    pub contributing: usize,
    pub skipped: usize,
}

/// Softmax cross-entropy of every level-0 patch against the cell nearest the
/// true position, averaged over contributing cells; zero if none contribute.
///
/// `truth: [M, T, 2]` pixels, `visible: [M, T]` 0/1.
pub fn loss_score<S: Scalar>(
    tape: &mut Tape<S>,
    history: &[ScorePatches<S>],
    truth: &Tensor<S>,
    visible: &Tensor<S>,
    radius: usize,
    stride: usize,
) -> Result<ScoreLoss> {
    let p2 = (2 * radius + 1) * (2 * radius + 1);
    let mut rows = Vec::with_capacity(history.len());
    let mut targets = Vec::new();
    let mut skipped = 0;
    for sp in history {
        let shape = tape.shape(sp.scores).to_vec();
        if shape.len() != 3 || shape[2] != p2 || sp.centers.shape() != [shape[0], shape[1], 2] || truth.shape() != sp.centers.shape() {
            return Err(TensorError::Invalid {
                op: "loss_score",
                msg: format!("scores {shape:?}, centers {:?}, truth {:?}", sp.centers.shape(), truth.shape()),
            });
        }
        let cells = shape[0] * shape[1];
        for i in 0..cells {
            let c = [sp.centers.data()[2 * i].as_f64(), sp.centers.data()[2 * i + 1].as_f64()];
            let g = [truth.data()[2 * i].as_f64(), truth.data()[2 * i + 1].as_f64()];
            let vis = visible.data()[i] > S::lit(0.5);
            let tgt = score_target(c, g, vis, radius, stride);
            if vis && tgt.is_none() {
                skipped += 1;
            }
            targets.push(tgt);
        }
        rows.push(tape.reshape(sp.scores, &[cells, p2])?);
    }
    let logits = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? };
    let contributing = targets.iter().flatten().count();
    let loss = tape.softmax_ce(logits, &targets)?;
    Ok(ScoreLoss { loss, contributing, skipped })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub main: f64,
    pub visibility: f64,
    pub score: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { main: 1.0, visibility: 1.0, score: 1.0 }
    }
}

/// `w_main * main + w_vis * vis + w_score * score`.
pub fn total_loss<S: Scalar>(tape: &mut Tape<S>, main: Var, visibility: Var, score: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(main, S::lit(w.main))?;
    let b = tape.scale(visibility, S::lit(w.visibility))?;
    let c = tape.scale(score, S::lit(w.score))?;
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}
