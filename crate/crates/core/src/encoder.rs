//! Per-frame convolutional feature extractor.
//!
//! Layout: 7x7 stride-2 stem, then residual stages of 3x3 blocks with
//! instance normalization, then a 1x1 projection to `channels`. Every frame
//! is processed independently. Only the first block of each stage may
//! downsample; which stages do is decided from `ModelConfig::stride` at call
//! time, so weights trained at one stride run unchanged at another.

use rand::Rng;

use crate::config::ModelConfig;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Result, Tape, Tensor, TensorError, Var};
use crate::Scalar;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    pad: usize,
}

impl Conv {
    fn new<S: Scalar, R: Rng>(
        store: &mut ParamStore<S>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        // He initialization over fan-out
        let std = (2.0 / (cout * k * k) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::randn(&[cout, cin, k, k], std, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self { w, b, pad: k / 2 }
    }

    fn apply<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var, stride: usize) -> Result<Var> {
        tape.conv2d(x, p.var(self.w), Some(p.var(self.b)), stride, self.pad)
    }
}

#[derive(Clone, Debug)]
struct ResidualBlock {
    conv1: Conv,
    conv2: Conv,
    project: Option<Conv>,
}

impl ResidualBlock {
    fn forward<S: Scalar>(&self, tape: &mut Tape<S>, p: &Bound, x: Var, stride: usize) -> Result<Var> {
        let y = self.conv1.apply(tape, p, x, stride)?;
        let y = tape.instance_norm(y, NORM_EPS)?;
        let y = tape.relu(y)?;
        let y = self.conv2.apply(tape, p, y, 1)?;
        let y = tape.instance_norm(y, NORM_EPS)?;
        let y = tape.relu(y)?;
        let skip = match &self.project {
            Some(proj) => {
                let s = proj.apply(tape, p, x, stride)?;
                tape.instance_norm(s, NORM_EPS)?
            }
            None => x,
        };
        let sum = tape.add(skip, y)?;
        tape.relu(sum)
    }
}

/// Encoder weights (parameter names prefixed `encoder.`).
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: Conv,
    stages: Vec<Vec<ResidualBlock>>,
    head: Conv,
}

/// Per-frame feature maps `[frames, C, H/stride, W/stride]`.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMaps {
    pub feats: Var,
    pub stride: usize,
}

impl Encoder {
    pub fn new<S: Scalar, R: Rng>(store: &mut ParamStore<S>, config: &ModelConfig, rng: &mut R) -> Self {
        let ec = &config.encoder;
        let stem = Conv::new(store, "encoder.stem", 3, ec.stem_channels, 7, rng);
        let mut cin = ec.stem_channels;
        let mut stages = Vec::new();
        for (si, stage) in ec.stages.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..stage.blocks {
                let name = format!("encoder.stage{si}.block{bi}");
                let project = (bi == 0 && (si > 0 || cin != stage.channels))
                    .then(|| Conv::new(store, &format!("{name}.project"), cin, stage.channels, 1, rng));
                let conv1 = Conv::new(store, &format!("{name}.conv1"), cin, stage.channels, 3, rng);
                let conv2 = Conv::new(store, &format!("{name}.conv2"), stage.channels, stage.channels, 3, rng);
                blocks.push(ResidualBlock { conv1, conv2, project });
                cin = stage.channels;
            }
            stages.push(blocks);
        }
        let head = Conv::new(store, "encoder.head", cin, config.channels, 1, rng);
        Self { stem, stages, head }
    }

    /// Encodes `frames: [F, 3, H, W]` with values in `[0, 1]`.
    pub fn encode_frames<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        p: &Bound,
        frames: &Tensor<S>,
        config: &ModelConfig,
    ) -> Result<FeatureMaps> {
        let shape = frames.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(TensorError::Invalid {
                op: "encode_frames",
                msg: format!("expected frames [F, 3, H, W], got {shape:?}"),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if h % config.stride != 0 || w % config.stride != 0 {
            return Err(TensorError::Invalid {
                op: "encode_frames",
                msg: format!("frame size {h}x{w} is not divisible by stride {}; pad the frames first", config.stride),
            });
        }
        let strides = config
            .stage_strides()
            .map_err(|e| TensorError::Invalid { op: "encode_frames", msg: e.to_string() })?;
        if strides.len() != self.stages.len() {
            return Err(TensorError::Invalid {
                op: "encode_frames",
                msg: "config stage count differs from the encoder's".into(),
            });
        }
        let two = S::lit(2.0);
        let normalized = Tensor::new(shape, frames.data().iter().map(|&v| v * two - S::one()).collect())?;
        let x = tape.constant(normalized);
        let x = self.stem.apply(tape, p, x, 2)?;
        let x = tape.instance_norm(x, NORM_EPS)?;
        let mut x = tape.relu(x)?;
        for (blocks, &stride) in self.stages.iter().zip(&strides) {
            for (bi, block) in blocks.iter().enumerate() {
                x = block.forward(tape, p, x, if bi == 0 { stride } else { 1 })?;
            }
        }
        let feats = self.head.apply(tape, p, x, 1)?;
        Ok(FeatureMaps { feats, stride: config.stride })
    }
}
