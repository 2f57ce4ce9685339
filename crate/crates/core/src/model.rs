//! The tracker: target initialization, correlation pyramids, displacement
//! encoding, the MLP-Mixer update core, the visibility head and long-video
//! trajectory linking.
//!
//! Targets are batched as `M = B * N` rows (video-major). Positions `X` are
//! `[M, T, 2]` in full-resolution pixels and enter each update as constants;
//! gradients reach the trajectory only through the predicted deltas.

use rand::Rng;

use crate::config::ModelConfig;
use crate::encoder::{Encoder, FeatureMaps};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use crate::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, name: &str, din: usize, dout: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (din as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::rand_uniform(&[dout, din], -bound, bound, rng));
        let b = store.add(format!("{name}.bias"), Tensor::rand_uniform(&[dout], -bound, bound, rng));
        Self { w, b }
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        tape.dense(x, p.var(self.w), Some(p.var(self.b)))
    }
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.weight"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gamma, beta }
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct MixerBlock {
    token_norm: Norm,
    token_in: Linear,
    token_out: Linear,
    channel_norm: Norm,
    channel_in: Linear,
    channel_out: Linear,
}

impl MixerBlock {
    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var) -> Result<Var> {
        // token mixing across time
        let y = self.token_norm.apply(tape, p, x)?;
        let y = tape.transpose_last(y)?;
        let y = self.token_in.apply(tape, p, y)?;
        let y = tape.gelu(y)?;
        let y = self.token_out.apply(tape, p, y)?;
        let y = tape.transpose_last(y)?;
        let x = tape.add(x, y)?;
        // channel mixing per token
        let y = self.channel_norm.apply(tape, p, x)?;
        let y = self.channel_in.apply(tape, p, y)?;
        let y = tape.gelu(y)?;
        let y = self.channel_out.apply(tape, p, y)?;
        tape.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct Mixer {
    input: Linear,
    blocks: Vec<MixerBlock>,
    norm: Norm,
}

/// Multi-scale local correlation for every target and timestep.
#[derive(Clone, Copy, Debug)]
pub struct CorrPyramid {
    /// `[M, T, P * P * L]`, levels concatenated finest first.
    pub scores: Var,
    /// `[M, T, P * P]` finest-level patch (row-major, y outer).
    pub level0: Var,
}

/// Level-0 score patches of one iteration with the pixel centres they were
/// cropped around.
#[derive(Clone, Debug)]
pub struct ScorePatches<S> {
    pub scores: Var,
    pub centers: Tensor<S>,
}

/// Everything one forward pass produces for a batch of targets.
pub struct IterOutput<S> {
    /// `X^1 .. X^K`, each `[M, T, 2]`.
    pub trajectories: Vec<Var>,
    /// `F^K`, `[M, T, C]`.
    pub features: Var,
    /// Visibility probabilities `[M, T]`.
    pub visibility: Var,
    /// One entry per iteration, for score supervision.
    pub score_history: Vec<ScorePatches<S>>,
}

/// Per-target estimate over one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTrack {
    pub positions: Vec<[f32; 2]>,
    pub visibility: Vec<f32>,
}

pub struct Tracker<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    encoder: Encoder,
    mixer: Mixer,
    update_head: Linear,
    vis_head: Linear,
}

impl<S: Scalar> Tracker<S> {
    /// Fresh weights. Parameter order (and thus file order) is: encoder,
    /// mixer input, mixer blocks, mixer norm, update head, visibility head.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> std::result::Result<Self, crate::config::ConfigError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let encoder = Encoder::new(&mut params, &config, rng);
        let h = config.mixer_hidden;
        let t = config.window;
        let input = Linear::new(&mut params, "mixer.input", config.token_dim(), h, rng);
        let blocks = (0..config.mixer_depth)
            .map(|i| {
                let n = format!("mixer.block{i}");
                MixerBlock {
                    token_norm: Norm::new(&mut params, &format!("{n}.token_norm"), h),
                    token_in: Linear::new(&mut params, &format!("{n}.token_in"), t, t * config.token_expansion, rng),
                    token_out: Linear::new(&mut params, &format!("{n}.token_out"), t * config.token_expansion, t, rng),
                    channel_norm: Norm::new(&mut params, &format!("{n}.channel_norm"), h),
                    channel_in: Linear::new(&mut params, &format!("{n}.channel_in"), h, h * config.channel_expansion, rng),
                    channel_out: Linear::new(&mut params, &format!("{n}.channel_out"), h * config.channel_expansion, h, rng),
                }
            })
            .collect();
        let norm = Norm::new(&mut params, "mixer.norm", h);
        let update_head = Linear::new(&mut params, "heads.update", h, config.head_dim(), rng);
        let vis_head = Linear::new(&mut params, "heads.visibility", config.channels, 1, rng);
        Ok(Self { config, params, encoder, mixer: Mixer { input, blocks, norm }, update_head, vis_head })
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Bound {
        self.params.bind(tape, trainable)
    }

    /// Feature maps for `frames: [F, 3, H, W]`.
    pub fn encode(&self, tape: &mut Tape<S>, p: &Bound, frames: &Tensor<S>) -> Result<FeatureMaps> {
        self.encoder.encode_frames(tape, p, frames, &self.config)
    }

    /// Samples the query feature `f_1` on the first frame of each video and
    /// tiles it over time. Returns `(X^0 [M, T, 2], F^0 [M, T, C], f_1 [M, C])`.
    ///
    /// `queries: [B, N, 2]` pixels, one row per target of video `b`.
    pub fn init_target(&self, tape: &mut Tape<S>, fm: &FeatureMaps, queries: &Tensor<S>) -> Result<(Tensor<S>, Var, Var)> {
        let t = self.config.window;
        let fs = tape.shape(fm.feats).to_vec();
        let qs = queries.shape().to_vec();
        if qs.len() != 3 || qs[2] != 2 || fs[0] != qs[0] * t {
            return Err(TensorError::Invalid {
                op: "init_target",
                msg: format!("queries {qs:?} do not match {} frames of window {t}", fs[0]),
            });
        }
        let (b, n) = (qs[0], qs[1]);
        let (c, hs, ws) = (fs[1], fs[2], fs[3]);
        let (img_h, img_w) = ((hs * fm.stride) as f64, (ws * fm.stride) as f64);
        for q in queries.data().chunks(2) {
            let (x, y) = (q[0].as_f64(), q[1].as_f64());
            if !(x >= 0.0 && y >= 0.0 && x <= img_w - 1.0 && y <= img_h - 1.0) {
                return Err(TensorError::Invalid {
                    op: "init_target",
                    msg: format!("query ({x}, {y}) outside the {img_w}x{img_h} image"),
                });
            }
        }
        let feats5 = tape.reshape(fm.feats, &[b, t, c, hs, ws])?;
        let first = tape.narrow(feats5, 1, 0, 1)?;
        let first = tape.reshape(first, &[b, c, hs, ws])?;
        let inv = S::one() / S::lit(fm.stride as f64);
        let cell = Tensor::new(&qs, queries.data().iter().map(|&v| v * inv).collect())?;
        let coords = tape.constant(cell);
        let f1 = tape.bilinear_sample(first, coords)?;
        let f1 = tape.reshape(f1, &[b * n, c])?;
        let f0 = tape.repeat_axis(f1, 1, t)?;
        let mut x0 = Vec::with_capacity(b * n * t * 2);
        for q in queries.data().chunks(2) {
            for _ in 0..t {
                x0.extend_from_slice(q);
            }
        }
        Ok((Tensor::new(&[b * n, t, 2], x0)?, f0, f1))
    }

    /// Correlates each `F[t]` with frame `t`'s feature map (scaled by
    /// `1/sqrt(C)`), pools the map `L - 1` times, and crops a unit-spaced
    /// `P x P` patch around `X[t] / (stride * 2^l)` on every level.
    pub fn corr_pyramid(&self, tape: &mut Tape<S>, fm: &FeatureMaps, features: Var, positions: &Tensor<S>) -> Result<CorrPyramid> {
        let cfg = &self.config;
        let t = cfg.window;
        let fs = tape.shape(fm.feats).to_vec();
        let (c, hs, ws) = (fs[1], fs[2], fs[3]);
        let b = fs[0] / t;
        let m = tape.shape(features)[0];
        if m % b.max(1) != 0 || tape.shape(features) != [m, t, c] || positions.shape() != [m, t, 2] {
            return Err(TensorError::Invalid {
                op: "corr_pyramid",
                msg: format!(
                    "features {:?} / positions {:?} inconsistent with {b} videos of {t} frames and {c} channels",
                    tape.shape(features),
                    positions.shape()
                ),
            });
        }
        let n = m / b;
        let p = cfg.patch();
        let r = cfg.radius as f64;

        // [B*T, N, C] x [B*T, C, HW] -> [B*T, N, HW]
        let f = tape.reshape(features, &[b, n, t, c])?;
        let f = tape.permute(f, &[0, 2, 1, 3])?;
        let f = tape.reshape(f, &[b * t, n, c])?;
        let maps = tape.reshape(fm.feats, &[b * t, c, hs * ws])?;
        let corr = tape.bmm(f, maps)?;
        let corr = tape.scale(corr, S::one() / S::lit(c as f64).sqrt())?;
        let mut level_map = tape.reshape(corr, &[b * t * n, 1, hs, ws])?;

        let pos = positions.data();
        let mut levels = Vec::with_capacity(cfg.levels);
        for l in 0..cfg.levels {
            if l > 0 {
                level_map = tape.avg_pool2(level_map)?;
            }
            let scale = 1.0 / (fm.stride as f64 * f64::powi(2.0, l as i32));
            let mut coords = Vec::with_capacity(b * t * n * p * p * 2);
            for bi in 0..b {
                for ti in 0..t {
                    for ni in 0..n {
                        let base = ((bi * n + ni) * t + ti) * 2;
                        let cx = pos[base].as_f64() * scale;
                        let cy = pos[base + 1].as_f64() * scale;
                        for dy in 0..p {
                            for dx in 0..p {
                                coords.push(S::lit(cx + dx as f64 - r));
                                coords.push(S::lit(cy + dy as f64 - r));
                            }
                        }
                    }
                }
            }
            let coords = tape.constant(Tensor::new(&[b * t * n, p * p, 2], coords)?);
            let patch = tape.bilinear_sample(level_map, coords)?;
            let patch = tape.reshape(patch, &[b, t, n, p * p])?;
            let patch = tape.permute(patch, &[0, 2, 1, 3])?;
            levels.push(tape.reshape(patch, &[m, t, p * p])?);
        }
        let scores = if levels.len() == 1 { levels[0] } else { tape.concat(&levels, 2)? };
        Ok(CorrPyramid { scores, level0: levels[0] })
    }

    /// Runs the mixer on tokens `concat(F[t], corr[t], disp[t])` and returns
    /// `(dX [M, T, 2], dF [M, T, C])`.
    pub fn mixer_update(&self, tape: &mut Tape<S>, p: &Bound, features: Var, corr: Var, disp: Var) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let m = tape.shape(features)[0];
        let tokens = tape.concat(&[features, corr, disp], 2)?;
        let mut x = self.mixer.input.apply(tape, p, tokens)?;
        for block in &self.mixer.blocks {
            x = block.forward(tape, p, x)?;
        }
        let x = self.mixer.norm.apply(tape, p, x)?;
        let pooled = tape.mean_axis(x, 1)?;
        let out = self.update_head.apply(tape, p, pooled)?;
        let out = tape.reshape(out, &[m, cfg.window, cfg.channels + 2])?;
        let d_feat = tape.narrow(out, 2, 0, cfg.channels)?;
        let d_pos = tape.narrow(out, 2, cfg.channels, 2)?;
        Ok((d_pos, d_feat))
    }

    /// Per-timestep visibility `sigmoid(linear(F))`, `[M, T]`.
    pub fn visibility(&self, tape: &mut Tape<S>, p: &Bound, features: Var) -> Result<Var> {
        let shape = tape.shape(features).to_vec();
        let logits = self.vis_head.apply(tape, p, features)?;
        let v = tape.sigmoid(logits)?;
        tape.reshape(v, &shape[..2])
    }

    /// Initialization followed by `K` rounds of correlate, encode, update.
    ///
    /// `initial_features` overrides the sampled `F^0` (trajectory linking
    /// re-uses the original target feature).
    pub fn iterate(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        fm: &FeatureMaps,
        queries: &Tensor<S>,
        initial_features: Option<Var>,
    ) -> Result<IterOutput<S>> {
        let (x0, f0, _) = self.init_target(tape, fm, queries)?;
        let mut features = match initial_features {
            Some(f) => {
                if tape.shape(f) != tape.shape(f0) {
                    return Err(TensorError::Invalid { op: "iterate", msg: "initial features have the wrong shape".into() });
                }
                f
            }
            None => f0,
        };
        let origins = Tensor::new(&[x0.shape()[0], 2], queries.data().to_vec())?;
        let mut positions = x0;
        let mut trajectories = Vec::with_capacity(self.config.iters);
        let mut score_history = Vec::with_capacity(self.config.iters);
        for _ in 0..self.config.iters {
            let corr = self.corr_pyramid(tape, fm, features, &positions)?;
            let disp = tape.constant(encode_displacements(&positions, &origins, &self.config)?);
            let (d_pos, d_feat) = self.mixer_update(tape, p, features, corr.scores, disp)?;
            score_history.push(ScorePatches { scores: corr.level0, centers: positions.clone() });
            let base = tape.constant(positions);
            let next = tape.add(base, d_pos)?;
            features = tape.add(features, d_feat)?;
            positions = tape.value(next).clone();
            trajectories.push(next);
        }
        let visibility = self.visibility(tape, p, features)?;
        Ok(IterOutput { trajectories, features, visibility, score_history })
    }
}

/// Sinusoidal encoding of `X[t] - origin` with frequencies `2^i`, scaled by
/// `pi / enc_scale`. Per timestep the layout is
/// `[sin x (F), cos x (F), sin y (F), cos y (F)]`.
pub fn encode_displacements<S: Scalar>(positions: &Tensor<S>, origins: &Tensor<S>, config: &ModelConfig) -> Result<Tensor<S>> {
    let ps = positions.shape();
    if ps.len() != 3 || ps[2] != 2 || origins.shape() != [ps[0], 2] {
        return Err(TensorError::Invalid {
            op: "encode_displacements",
            msg: format!("positions {ps:?} vs origins {:?}", origins.shape()),
        });
    }
    let (m, t) = (ps[0], ps[1]);
    let nf = config.enc_freqs;
    let base = std::f64::consts::PI / config.enc_scale;
    let mut out = Vec::with_capacity(m * t * 4 * nf);
    let (pd, od) = (positions.data(), origins.data());
    for mi in 0..m {
        for ti in 0..t {
            for axis in 0..2 {
                let d = pd[(mi * t + ti) * 2 + axis] - od[mi * 2 + axis];
                let d = d.as_f64();
                for i in 0..nf {
                    out.push(S::lit((d * f64::powi(2.0, i as i32) * base).sin()));
                }
                for i in 0..nf {
                    out.push(S::lit((d * f64::powi(2.0, i as i32) * base).cos()));
                }
            }
        }
    }
    Tensor::new(&[m, t, 4 * nf], out)
}

/// Picks where the next window starts: the latest index `1..T` whose
/// visibility clears a threshold that starts at 0.99 and drops by 0.01
/// until something qualifies.
pub fn select_restart(visibility: &[f32]) -> usize {
    assert!(visibility.len() >= 2, "window must hold at least two timesteps");
    // hundredths avoid accumulating float error in the threshold
    for hundredths in (0..=99).rev() {
        let threshold = hundredths as f32 / 100.0;
        if let Some(i) = (1..visibility.len()).rev().find(|&i| visibility[i] >= threshold) {
            return i;
        }
    }
    visibility.len() - 1
}

/// Source of per-window estimates for [`link_trajectories`].
pub trait WindowModel {
    fn window(&self) -> usize;

    /// Tracks over frames `start .. start + T` (indices past the end repeat
    /// the last frame) from `query` at frame `start`.
    fn track_window(&self, start: usize, query: [f32; 2]) -> Result<WindowTrack>;
}

/// Linked estimate over a whole video plus the frames where tracking was
/// re-initialized.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkedTrack {
    pub positions: Vec<[f32; 2]>,
    pub visibility: Vec<f32>,
    pub restarts: Vec<usize>,
}

/// Chains windows over `num_frames >= T` frames, restarting each window at a
/// late, confidently visible timestep of the previous one. Overlapping
/// frames keep the most recent window's estimate.
pub fn link_trajectories<W: WindowModel + ?Sized>(model: &W, num_frames: usize, query: [f32; 2]) -> Result<LinkedTrack> {
    let t = model.window();
    if num_frames < t {
        return Err(TensorError::Invalid {
            op: "link_trajectories",
            msg: format!("video has {num_frames} frames, fewer than the window of {t}"),
        });
    }
    let mut positions = vec![[0.0f32; 2]; num_frames];
    let mut visibility = vec![0.0f32; num_frames];
    let mut restarts = Vec::new();
    let mut start = 0;
    let mut q = query;
    loop {
        let est = model.track_window(start, q)?;
        for i in 0..t.min(num_frames - start) {
            positions[start + i] = est.positions[i];
            visibility[start + i] = est.visibility[i];
        }
        if start + t >= num_frames {
            break;
        }
        let j = select_restart(&est.visibility);
        start += j;
        q = est.positions[j];
        restarts.push(start);
    }
    Ok(LinkedTrack { positions, visibility, restarts })
}

/// Real-model windows over precomputed per-frame features.
pub struct FeatureWindows<'a> {
    tracker: &'a Tracker<f32>,
    /// `[S, C, Hs, Ws]`
    feats: Tensor<f32>,
    /// Original target feature `f_1`, `[C]`.
    target_feature: Tensor<f32>,
}

impl<'a> FeatureWindows<'a> {
    /// Encodes all frames (`[S, 3, H, W]`) once and samples the target feature
    /// at `query` on frame 0.
    pub fn new(tracker: &'a Tracker<f32>, frames: &Tensor<f32>, query: [f32; 2]) -> Result<Self> {
        let feats = encode_all(tracker, frames)?;
        Self::from_features(tracker, feats, query)
    }

    pub fn from_features(tracker: &'a Tracker<f32>, feats: Tensor<f32>, query: [f32; 2]) -> Result<Self> {
        let target_feature = sample_target_feature(tracker, &feats, query)?;
        Ok(Self { tracker, feats, target_feature })
    }
}

/// Encodes frames in chunks of one window to bound peak memory.
pub fn encode_all(tracker: &Tracker<f32>, frames: &Tensor<f32>) -> Result<Tensor<f32>> {
    let fs = frames.shape();
    let per = fs[1..].iter().product::<usize>();
    let mut out = Vec::new();
    let mut shape = Vec::new();
    for chunk in frames.data().chunks(per * tracker.config.window) {
        let n = chunk.len() / per;
        let mut tape = Tape::new();
        let p = tracker.bind(&mut tape, false);
        let mut cs = fs.to_vec();
        cs[0] = n;
        let fm = tracker.encode(&mut tape, &p, &Tensor::new(&cs, chunk.to_vec())?)?;
        shape = tape.shape(fm.feats).to_vec();
        out.extend_from_slice(tape.value(fm.feats).data());
    }
    shape[0] = fs[0];
    Tensor::new(&shape, out)
}

fn sample_target_feature(tracker: &Tracker<f32>, feats: &Tensor<f32>, query: [f32; 2]) -> Result<Tensor<f32>> {
    let s = feats.shape();
    let (c, hs, ws) = (s[1], s[2], s[3]);
    let stride = tracker.config.stride as f32;
    let (img_w, img_h) = ((ws as f32) * stride, (hs as f32) * stride);
    if !(query[0] >= 0.0 && query[1] >= 0.0 && query[0] <= img_w - 1.0 && query[1] <= img_h - 1.0) {
        return Err(TensorError::Invalid {
            op: "init_target",
            msg: format!("query ({}, {}) outside the {img_w}x{img_h} image", query[0], query[1]),
        });
    }
    let mut tape = Tape::new();
    let first = tape.constant(Tensor::new(&[1, c, hs, ws], feats.data()[..c * hs * ws].to_vec())?);
    let coords = tape.constant(Tensor::new(&[1, 1, 2], vec![query[0] / stride, query[1] / stride])?);
    let f = tape.bilinear_sample(first, coords)?;
    Ok(tape.value(f).clone().reshaped(&[c])?)
}

impl WindowModel for FeatureWindows<'_> {
    fn window(&self) -> usize {
        self.tracker.config.window
    }

    fn track_window(&self, start: usize, query: [f32; 2]) -> Result<WindowTrack> {
        let t = self.window();
        let s = self.feats.shape();
        let per: usize = s[1..].iter().product();
        let mut data = Vec::with_capacity(t * per);
        for i in 0..t {
            let f = (start + i).min(s[0] - 1);
            data.extend_from_slice(&self.feats.data()[f * per..(f + 1) * per]);
        }
        let mut tape = Tape::new();
        let p = self.tracker.bind(&mut tape, false);
        let mut ws = s.to_vec();
        ws[0] = t;
        let feats = tape.constant(Tensor::new(&ws, data)?);
        let fm = FeatureMaps { feats, stride: self.tracker.config.stride };
        let tf = tape.constant(self.target_feature.clone().reshaped(&[1, s[1]])?);
        let f0 = tape.repeat_axis(tf, 1, t)?;
        let queries = Tensor::new(&[1, 1, 2], query.to_vec())?;
        let out = self.tracker.iterate(&mut tape, &p, &fm, &queries, Some(f0))?;
        let last = *out.trajectories.last().expect("at least one iteration");
        let positions = tape.value(last).data().chunks(2).map(|c| [c[0], c[1]]).collect();
        let visibility = tape.value(out.visibility).data().to_vec();
        Ok(WindowTrack { positions, visibility })
    }
}
