//! Trajectory error metrics and reference trackers.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSample;

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct EvalError(pub String);

/// Average trajectory error split by visibility. A trajectory is "visible"
/// when at least half of its timesteps are visible. Absent splits are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate_visible: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ate_occluded: Option<f64>,
    pub num_visible: usize,
    pub num_occluded: usize,
    /// Mean distance of every trajectory, in input order.
    pub per_trajectory: Vec<f64>,
}

type Track = Vec<[f32; 2]>;

fn check_shapes(pred: &[Track], gt: &[Track], vis: &[Vec<u8>]) -> Result<(), EvalError> {
    if pred.len() != gt.len() || gt.len() != vis.len() {
        return Err(EvalError(format!("{} predictions, {} ground-truth tracks, {} visibility rows", pred.len(), gt.len(), vis.len())));
    }
    for (n, ((p, g), v)) in pred.iter().zip(gt).zip(vis).enumerate() {
        if p.len() != g.len() || g.len() != v.len() {
            return Err(EvalError(format!("trajectory {n}: {} predicted, {} true, {} labels", p.len(), g.len(), v.len())));
        }
    }
    Ok(())
}

fn dist(a: [f32; 2], b: [f32; 2]) -> f64 {
    (a[0] as f64 - b[0] as f64).hypot(a[1] as f64 - b[1] as f64)
}

/// Per-trajectory mean Euclidean distance over all timesteps, averaged
/// within the visible and occluded splits.
pub fn eval_ate(pred: &[Track], gt: &[Track], vis: &[Vec<u8>]) -> Result<EvalReport, EvalError> {
    check_shapes(pred, gt, vis)?;
    let mut per_trajectory = Vec::with_capacity(pred.len());
    let (mut sum_v, mut sum_o, mut n_v, mut n_o) = (0.0, 0.0, 0, 0);
    for ((p, g), v) in pred.iter().zip(gt).zip(vis) {
        let t = p.len();
        let err = if t == 0 { 0.0 } else { p.iter().zip(g).map(|(&a, &b)| dist(a, b)).sum::<f64>() / t as f64 };
        per_trajectory.push(err);
        let visible: usize = v.iter().map(|&x| x as usize).sum();
        if 2 * visible >= t {
            sum_v += err;
            n_v += 1;
        } else {
            sum_o += err;
            n_o += 1;
        }
    }
    Ok(EvalReport {
        ate_visible: (n_v > 0).then(|| sum_v / n_v as f64),
        ate_occluded: (n_o > 0).then(|| sum_o / n_o as f64),
        num_visible: n_v,
        num_occluded: n_o,
        per_trajectory,
    })
}

/// Fraction of annotated points (label 1) within `0.2 * sqrt(area[t])` of
/// the truth. `None` when nothing is annotated.
pub fn eval_pck(pred: &[Track], gt: &[Track], annotated: &[Vec<u8>], area: &[f64]) -> Result<Option<f64>, EvalError> {
    check_shapes(pred, gt, annotated)?;
    let (mut correct, mut total) = (0usize, 0usize);
    for ((p, g), a) in pred.iter().zip(gt).zip(annotated) {
        for t in 0..p.len() {
            if a[t] == 0 {
                continue;
            }
            let area_t = *area.get(t).ok_or_else(|| EvalError(format!("no area given for frame {t}")))?;
            if !(area_t > 0.0) {
                return Err(EvalError(format!("area at frame {t} must be positive, got {area_t}")));
            }
            total += 1;
            if dist(p[t], g[t]) <= 0.2 * area_t.sqrt() {
                correct += 1;
            }
        }
    }
    Ok((total > 0).then(|| correct as f64 / total as f64))
}

/// Every query held still for `t` frames.
pub fn baseline_zero_velocity(queries: &[[f32; 2]], t: usize) -> Vec<Track> {
    queries.iter().map(|&q| vec![q; t]).collect()
}

/// Chains the sample's forward flow from each query, clamping to the image
/// after every step. Occluded points follow whatever is drawn on top.
pub fn baseline_gt_flow_chain(sample: &SyntheticSample, queries: &[[f32; 2]]) -> Vec<Track> {
    let (wmax, hmax) = ((sample.width - 1) as f64, (sample.height - 1) as f64);
    queries
        .iter()
        .map(|&q| {
            let mut p = [q[0] as f64, q[1] as f64];
            let mut out = vec![q];
            for t in 0..sample.len - 1 {
                let f = sample.flow_at(true, t, p);
                p = [(p[0] + f[0]).clamp(0.0, wmax), (p[1] + f[1]).clamp(0.0, hmax)];
                out.push([p[0] as f32, p[1] as f32]);
            }
            out
        })
        .collect()
}
