//! Synthetic training data: textured sprites under smooth affine motion with
//! exact flow, trajectories mined by flow chaining, occluder compositing and
//! geometry-aware augmentation.

mod augment;
pub mod io;
mod mining;
mod occlude;
mod scene;

pub use augment::{
    adjust_color, augment, flip_horizontal, flip_vertical, gaussian_blur, rescale, shifting_crop, AugmentPolicy,
};
pub use mining::{chain_and_filter, instance_at, mine_trajectories, Chain, Fate};
pub use occlude::{paste_occluder, paste_random_occluder};
pub use scene::{render_sequence, Affine, Background, Sprite, SpriteScene, SpriteSceneConfig, Texture, TextureKind};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("invalid scene config: {0}")]
    Config(String),
    #[error("{0}")]
    Invalid(String),
    #[error("malformed {what}: {msg}")]
    Format { what: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One rendered sequence with dense ground truth.
///
/// Pixel `(x, y)` is column `x`, row `y`; positions are in pixels with pixel
/// centres on integers. `bwd_flow[t]` maps frame `t + 1` back to frame `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub len: usize,
    pub height: usize,
    pub width: usize,
    /// `[T, 3, H, W]` in `[0, 1]`.
    pub frames: Vec<f32>,
    /// `[T - 1, 2, H, W]`.
    pub fwd_flow: Vec<f32>,
    /// `[T - 1, 2, H, W]`.
    pub bwd_flow: Vec<f32>,
    /// `[T, H, W]`, 0 is the background.
    pub instance_ids: Vec<u32>,
    /// `N x T` positions.
    pub trajs: Vec<Vec<[f32; 2]>>,
    /// `N x T`, 1 when the point is in view and unoccluded.
    pub vis: Vec<Vec<u8>>,
}

impl SyntheticSample {
    /// A blank sample with no trajectories.
    pub fn empty(len: usize, height: usize, width: usize) -> Self {
        let px = height * width;
        Self {
            len,
            height,
            width,
            frames: vec![0.0; len * 3 * px],
            fwd_flow: vec![0.0; len.saturating_sub(1) * 2 * px],
            bwd_flow: vec![0.0; len.saturating_sub(1) * 2 * px],
            instance_ids: vec![0; len * px],
            trajs: Vec::new(),
            vis: Vec::new(),
        }
    }

    pub fn num_trajs(&self) -> usize {
        self.trajs.len()
    }

    pub fn in_bounds(&self, p: [f64; 2]) -> bool {
        p[0] >= 0.0 && p[1] >= 0.0 && p[0] <= (self.width - 1) as f64 && p[1] <= (self.height - 1) as f64
    }

    pub fn id(&self, t: usize, x: usize, y: usize) -> u32 {
        self.instance_ids[(t * self.height + y) * self.width + x]
    }

    /// Instance under the nearest pixel, `None` out of bounds.
    pub fn id_nearest(&self, t: usize, p: [f64; 2]) -> Option<u32> {
        let (x, y) = (p[0].round(), p[1].round());
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f64 || y > (self.height - 1) as f64 {
            return None;
        }
        Some(self.id(t, x as usize, y as usize))
    }

    pub fn pixel(&self, t: usize, x: usize, y: usize) -> [f32; 3] {
        let px = self.height * self.width;
        let base = t * 3 * px + y * self.width + x;
        [self.frames[base], self.frames[base + px], self.frames[base + 2 * px]]
    }

    /// Bilinear flow lookup with border clamping. `forward` selects
    /// `fwd_flow[t]`, otherwise `bwd_flow[t]`.
    pub fn flow_at(&self, forward: bool, t: usize, p: [f64; 2]) -> [f64; 2] {
        let field = if forward { &self.fwd_flow } else { &self.bwd_flow };
        let px = self.height * self.width;
        let base = t * 2 * px;
        [
            bilinear(&field[base..base + px], self.width, self.height, p),
            bilinear(&field[base + px..base + 2 * px], self.width, self.height, p),
        ]
    }

    /// Instance label of trajectory `n`, read at its first position.
    pub fn trajectory_instance(&self, n: usize) -> Option<u32> {
        let p = self.trajs[n][0];
        self.id_nearest(0, [p[0] as f64, p[1] as f64])
    }

    /// Frames as a `[T, 3, H, W]` tensor.
    pub fn frames_tensor(&self) -> Tensor<f32> {
        Tensor::new(&[self.len, 3, self.height, self.width], self.frames.clone()).expect("frame buffer matches its dims")
    }

    /// Marks every out-of-bounds position invisible.
    pub fn clear_out_of_bounds(&mut self) {
        for n in 0..self.trajs.len() {
            for t in 0..self.len {
                let p = self.trajs[n][t];
                if !self.in_bounds([p[0] as f64, p[1] as f64]) {
                    self.vis[n][t] = 0;
                }
            }
        }
    }
}

/// Bilinear sample of a row-major `w x h` plane, coordinates clamped to the border.
pub(crate) fn bilinear(plane: &[f32], w: usize, h: usize, p: [f64; 2]) -> f64 {
    let x = p[0].clamp(0.0, (w - 1) as f64);
    let y = p[1].clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| plane[yy * w + xx] as f64;
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}
