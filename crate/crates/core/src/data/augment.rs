//! Photometric and geometric augmentation. Geometric ops move trajectories,
//! flow and instance ids together; photometric ops touch only pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bilinear, DataError, Result, SyntheticSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Per-channel gains are drawn from `1 +- color`.
    pub color: f64,
    /// Additive brightness drawn from `+- brightness`.
    pub brightness: f64,
    /// Zoom factor range about the image centre.
    pub scale: [f64; 2],
    /// Output `[height, width]`; `None` keeps the full frame.
    pub crop: Option<[usize; 2]>,
    /// Largest crop drift in whole pixels per frame, per axis.
    pub crop_shift: usize,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            color: 0.2,
            brightness: 0.1,
            scale: [0.9, 1.1],
            crop: Some([64, 96]),
            crop_shift: 1,
            blur_prob: 0.2,
            blur_sigma: [0.3, 1.0],
            hflip_prob: 0.5,
            vflip_prob: 0.1,
        }
    }
}

impl AugmentPolicy {
    /// A fixed centred crop and nothing else.
    pub fn center_crop(size: [usize; 2]) -> Self {
        Self {
            color: 0.0,
            brightness: 0.0,
            scale: [1.0, 1.0],
            crop: Some(size),
            crop_shift: 0,
            blur_prob: 0.0,
            blur_sigma: [0.5, 0.5],
            hflip_prob: 0.0,
            vflip_prob: 0.0,
        }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if lo >= hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Applies the policy: colour, zoom, drifting crop, blur, flips.
pub fn augment(sample: &SyntheticSample, policy: &AugmentPolicy, seed: u64) -> Result<SyntheticSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = sample.clone();
    let gains = [0; 3].map(|_| uniform(&mut rng, 1.0 - policy.color, 1.0 + policy.color));
    let bias = uniform(&mut rng, -policy.brightness, policy.brightness);
    adjust_color(&mut s, gains, bias);
    let zoom = uniform(&mut rng, policy.scale[0], policy.scale[1]);
    if zoom != 1.0 {
        s = rescale(&s, zoom);
    }
    if let Some([ch, cw]) = policy.crop {
        if ch > s.height || cw > s.width {
            return Err(DataError::Invalid(format!("crop {ch}x{cw} is larger than the {}x{} frame", s.height, s.width)));
        }
        let steps = (s.len - 1) as i64;
        let mut pick = |room: usize| {
            let max_shift = (policy.crop_shift as i64).min(room as i64 / steps.max(1));
            let shift = if max_shift > 0 { rng.gen_range(-max_shift..=max_shift) } else { 0 };
            let lo = (-shift * steps).max(0);
            let hi = room as i64 - (shift * steps).max(0);
            let origin = if policy.crop_shift == 0 { room as i64 / 2 } else { rng.gen_range(lo..=hi) };
            (origin, shift)
        };
        let (oy, dy) = pick(s.height - ch);
        let (ox, dx) = pick(s.width - cw);
        s = shifting_crop(&s, [ch, cw], [ox, oy], [dx, dy])?;
    }
    if rng.gen_bool(policy.blur_prob.clamp(0.0, 1.0)) {
        let sigma = uniform(&mut rng, policy.blur_sigma[0], policy.blur_sigma[1]);
        gaussian_blur(&mut s, sigma);
    }
    if rng.gen_bool(policy.hflip_prob.clamp(0.0, 1.0)) {
        flip_horizontal(&mut s);
    }
    if rng.gen_bool(policy.vflip_prob.clamp(0.0, 1.0)) {
        flip_vertical(&mut s);
    }
    Ok(s)
}

/// `v * gain[c] + bias`, clamped to `[0, 1]`.
pub fn adjust_color(s: &mut SyntheticSample, gains: [f64; 3], bias: f64) {
    let px = s.height * s.width;
    for (i, v) in s.frames.iter_mut().enumerate() {
        let c = (i / px) % 3;
        *v = (*v as f64 * gains[c] + bias).clamp(0.0, 1.0) as f32;
    }
}

/// Zooms by `factor` about the image centre, keeping the frame size.
pub fn rescale(s: &SyntheticSample, factor: f64) -> SyntheticSample {
    let (h, w) = (s.height, s.width);
    let px = h * w;
    let c = [(w - 1) as f64 / 2.0, (h - 1) as f64 / 2.0];
    let src = |x: usize, y: usize| [(x as f64 - c[0]) / factor + c[0], (y as f64 - c[1]) / factor + c[1]];
    let mut out = s.clone();
    for plane in 0..s.len * 3 {
        let data = &s.frames[plane * px..(plane + 1) * px];
        for y in 0..h {
            for x in 0..w {
                out.frames[plane * px + y * w + x] = bilinear(data, w, h, src(x, y)) as f32;
            }
        }
    }
    for (field, dst) in [(&s.fwd_flow, &mut out.fwd_flow), (&s.bwd_flow, &mut out.bwd_flow)] {
        for plane in 0..field.len() / px {
            let data = &field[plane * px..(plane + 1) * px];
            for y in 0..h {
                for x in 0..w {
                    dst[plane * px + y * w + x] = (bilinear(data, w, h, src(x, y)) * factor) as f32;
                }
            }
        }
    }
    for t in 0..s.len {
        for y in 0..h {
            for x in 0..w {
                let q = src(x, y);
                let qx = q[0].round().clamp(0.0, (w - 1) as f64) as usize;
                let qy = q[1].round().clamp(0.0, (h - 1) as f64) as usize;
                out.instance_ids[t * px + y * w + x] = s.id(t, qx, qy);
            }
        }
    }
    for traj in &mut out.trajs {
        for p in traj.iter_mut() {
            *p = [
                ((p[0] as f64 - c[0]) * factor + c[0]) as f32,
                ((p[1] as f64 - c[1]) * factor + c[1]) as f32,
            ];
        }
    }
    out.clear_out_of_bounds();
    out
}

/// Crops `size = [h, w]` at `origin + t * shift` (`[x, y]` pixels) on frame
/// `t`. Every crop window must lie inside the frame.
pub fn shifting_crop(s: &SyntheticSample, size: [usize; 2], origin: [i64; 2], shift: [i64; 2]) -> Result<SyntheticSample> {
    let [ch, cw] = size;
    if ch > s.height || cw > s.width {
        return Err(DataError::Invalid(format!("crop {ch}x{cw} is larger than the {}x{} frame", s.height, s.width)));
    }
    let at = |t: usize| [origin[0] + shift[0] * t as i64, origin[1] + shift[1] * t as i64];
    for t in 0..s.len {
        let o = at(t);
        if o[0] < 0 || o[1] < 0 || o[0] as usize + cw > s.width || o[1] as usize + ch > s.height {
            return Err(DataError::Invalid(format!("crop window at frame {t} ({o:?}) leaves the frame")));
        }
    }
    let (px, cpx) = (s.height * s.width, ch * cw);
    let mut out = SyntheticSample::empty(s.len, ch, cw);
    for t in 0..s.len {
        let [ox, oy] = at(t).map(|v| v as usize);
        for y in 0..ch {
            for x in 0..cw {
                let src = (y + oy) * s.width + x + ox;
                let dst = y * cw + x;
                for c in 0..3 {
                    out.frames[(t * 3 + c) * cpx + dst] = s.frames[(t * 3 + c) * px + src];
                }
                out.instance_ids[t * cpx + dst] = s.instance_ids[t * px + src];
                if t + 1 < s.len {
                    for c in 0..2 {
                        let d = shift[c] as f32;
                        out.fwd_flow[(t * 2 + c) * cpx + dst] = s.fwd_flow[(t * 2 + c) * px + src] - d;
                    }
                }
                if t > 0 {
                    for c in 0..2 {
                        let d = shift[c] as f32;
                        out.bwd_flow[((t - 1) * 2 + c) * cpx + dst] = s.bwd_flow[((t - 1) * 2 + c) * px + src] + d;
                    }
                }
            }
        }
    }
    out.trajs = s
        .trajs
        .iter()
        .map(|traj| {
            traj.iter()
                .enumerate()
                .map(|(t, p)| {
                    let o = at(t);
                    [p[0] - o[0] as f32, p[1] - o[1] as f32]
                })
                .collect()
        })
        .collect();
    out.vis = s.vis.clone();
    out.clear_out_of_bounds();
    Ok(out)
}

/// Separable Gaussian blur of the frames with edge replication.
pub fn gaussian_blur(s: &mut SyntheticSample, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (s.height as i64, s.width as i64);
    let px = (h * w) as usize;
    let mut tmp = vec![0.0f64; px];
    for plane in s.frames.chunks_mut(px) {
        for y in 0..h {
            for x in 0..w {
                tmp[(y * w + x) as usize] = (-radius..=radius)
                    .zip(&kernel)
                    .map(|(i, k)| k * plane[(y * w + (x + i).clamp(0, w - 1)) as usize] as f64)
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[(y * w + x) as usize] = (-radius..=radius)
                    .zip(&kernel)
                    .map(|(i, k)| k * tmp[((y + i).clamp(0, h - 1) * w + x) as usize])
                    .sum::<f64>() as f32;
            }
        }
    }
}

fn mirror(s: &mut SyntheticSample, axis: usize) {
    let (h, w) = (s.height, s.width);
    let px = h * w;
    let flip = |i: usize| {
        let (y, x) = (i / w, i % w);
        if axis == 0 {
            y * w + (w - 1 - x)
        } else {
            (h - 1 - y) * w + x
        }
    };
    let remap = |plane: &mut [f32]| {
        let copy = plane.to_vec();
        for (i, v) in plane.iter_mut().enumerate() {
            *v = copy[flip(i)];
        }
    };
    s.frames.chunks_mut(px).for_each(remap);
    for field in [&mut s.fwd_flow, &mut s.bwd_flow] {
        for (k, plane) in field.chunks_mut(px).enumerate() {
            remap(plane);
            if k % 2 == axis {
                plane.iter_mut().for_each(|v| *v = -*v);
            }
        }
    }
    for plane in s.instance_ids.chunks_mut(px) {
        let copy = plane.to_vec();
        for (i, v) in plane.iter_mut().enumerate() {
            *v = copy[flip(i)];
        }
    }
    let extent = if axis == 0 { w } else { h } as f64 - 1.0;
    for traj in &mut s.trajs {
        for p in traj.iter_mut() {
            p[axis] = (extent - p[axis] as f64) as f32;
        }
    }
}

/// `x -> W - 1 - x`.
pub fn flip_horizontal(s: &mut SyntheticSample) {
    mirror(s, 0);
}

/// `y -> H - 1 - y`.
pub fn flip_vertical(s: &mut SyntheticSample) {
    mirror(s, 1);
}
