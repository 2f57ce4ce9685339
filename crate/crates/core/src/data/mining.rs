//! Multi-frame trajectories from chained two-frame flow.

use super::SyntheticSample;

/// Why a chain stopped. `step` is the transition `t -> t + 1` that failed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fate {
    Kept,
    OutOfBounds { step: usize },
    Inconsistent { step: usize },
    InstanceChange { step: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chain {
    /// Positions from frame 0 up to the last accepted frame.
    pub positions: Vec<[f64; 2]>,
    /// Instance of the seed pixel.
    pub instance: u32,
    pub fate: Fate,
}

impl Chain {
    pub fn kept(&self) -> bool {
        self.fate == Fate::Kept
    }
}

/// The id shared by all four pixels around `p`, or `None` when they differ
/// (the point sits on a boundary) or `p` is out of bounds.
pub fn instance_at(sample: &SyntheticSample, t: usize, p: [f64; 2]) -> Option<u32> {
    if !sample.in_bounds(p) {
        return None;
    }
    let (x0, y0) = (p[0].floor() as usize, p[1].floor() as usize);
    let (x1, y1) = (p[0].ceil() as usize, p[1].ceil() as usize);
    let id = sample.id(t, x0, y0);
    [(x1, y0), (x0, y1), (x1, y1)].iter().all(|&(x, y)| sample.id(t, x, y) == id).then_some(id)
}

/// Seeds a grid on frame 0 and follows each seed through the forward flow.
/// A chain is discarded at the first step where it leaves the image, fails
/// the forward-backward check `|fwd + bwd(p + fwd)| <= fb_threshold`, or
/// lands somewhere whose instance is not the seed's.
pub fn chain_and_filter(sample: &SyntheticSample, grid_stride: usize, fb_threshold: f64) -> Vec<Chain> {
    let mut chains = Vec::new();
    for y in (0..sample.height).step_by(grid_stride) {
        for x in (0..sample.width).step_by(grid_stride) {
            let seed = [x as f64, y as f64];
            let instance = sample.id(0, x, y);
            let mut positions = vec![seed];
            let mut fate = Fate::Kept;
            for step in 0..sample.len - 1 {
                let p = positions[step];
                let f = sample.flow_at(true, step, p);
                let q = [p[0] + f[0], p[1] + f[1]];
                if !sample.in_bounds(q) {
                    fate = Fate::OutOfBounds { step };
                    break;
                }
                let b = sample.flow_at(false, step, q);
                if (f[0] + b[0]).hypot(f[1] + b[1]) > fb_threshold {
                    fate = Fate::Inconsistent { step };
                    break;
                }
                if instance_at(sample, step + 1, q) != Some(instance) {
                    fate = Fate::InstanceChange { step };
                    break;
                }
                positions.push(q);
            }
            chains.push(Chain { positions, instance, fate });
        }
    }
    chains
}

/// Replaces the sample's trajectories with the surviving chains, all visible.
pub fn mine_trajectories(sample: &mut SyntheticSample, grid_stride: usize, fb_threshold: f64) {
    let kept: Vec<Chain> = chain_and_filter(sample, grid_stride, fb_threshold).into_iter().filter(Chain::kept).collect();
    sample.trajs = kept.iter().map(|c| c.positions.iter().map(|p| [p[0] as f32, p[1] as f32]).collect()).collect();
    sample.vis = vec![vec![1; sample.len]; kept.len()];
}
