//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
#[error("invalid model config: {0}")]
pub struct ConfigError(pub String);

/// One residual stage of the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
}

/// Convolutional feature extractor: 7x7 stride-2 stem, residual stages, 1x1
/// projection to `ModelConfig::channels`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Frames processed jointly (T).
    pub window: usize,
    /// Feature channels (C).
    pub channels: usize,
    /// Update iterations (K).
    pub iters: usize,
    /// Correlation patch radius; the patch side is `2 * radius + 1`.
    pub radius: usize,
    /// Correlation pyramid levels (L).
    pub levels: usize,
    /// Per-iteration loss decay.
    pub gamma: f64,
    /// Encoder output stride in pixels.
    pub stride: usize,
    pub mixer_depth: usize,
    pub mixer_hidden: usize,
    /// Token-mixing MLP width as a multiple of `window`.
    pub token_expansion: usize,
    /// Channel-mixing MLP width as a multiple of `mixer_hidden`.
    pub channel_expansion: usize,
    /// Sinusoid frequencies per displacement axis.
    pub enc_freqs: usize,
    /// Displacement encoding scale: the largest image side seen in training.
    pub enc_scale: f64,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    /// Full-size settings: T=8, C=256, K=6, radius 3, four levels, stride 8,
    /// 12 mixer blocks, RAFT-style encoder widths.
    pub fn paper() -> Self {
        Self {
            window: 8,
            channels: 256,
            iters: 6,
            radius: 3,
            levels: 4,
            gamma: 0.8,
            stride: 8,
            mixer_depth: 12,
            mixer_hidden: 512,
            token_expansion: 4,
            channel_expansion: 2,
            enc_freqs: 16,
            enc_scale: 512.0,
            encoder: EncoderConfig {
                stem_channels: 64,
                stages: vec![
                    StageConfig { channels: 64, blocks: 2 },
                    StageConfig { channels: 96, blocks: 2 },
                    StageConfig { channels: 128, blocks: 2 },
                ],
            },
        }
    }

    /// Desk-scale settings for 64x96 frames.
    pub fn toy() -> Self {
        Self {
            window: 8,
            channels: 64,
            iters: 6,
            radius: 3,
            levels: 3,
            gamma: 0.8,
            stride: 4,
            mixer_depth: 4,
            mixer_hidden: 128,
            token_expansion: 4,
            channel_expansion: 2,
            enc_freqs: 8,
            enc_scale: 96.0,
            encoder: EncoderConfig {
                stem_channels: 32,
                stages: vec![
                    StageConfig { channels: 32, blocks: 1 },
                    StageConfig { channels: 48, blocks: 1 },
                    StageConfig { channels: 64, blocks: 1 },
                ],
            },
        }
    }

    /// Correlation patch side P.
    pub fn patch(&self) -> usize {
        2 * self.radius + 1
    }

    /// Correlation values per timestep, `P * P * L`.
    pub fn corr_dim(&self) -> usize {
        self.patch() * self.patch() * self.levels
    }

    /// Displacement encoding width E.
    pub fn enc_dim(&self) -> usize {
        4 * self.enc_freqs
    }

    /// Mixer token width D.
    pub fn token_dim(&self) -> usize {
        self.channels + self.corr_dim() + self.enc_dim()
    }

    /// Width of the update head, `T * (C + 2)`.
    pub fn head_dim(&self) -> usize {
        self.window * (self.channels + 2)
    }

    /// Stride of each encoder stage's first block: stage 0 keeps resolution,
    /// later stages halve it until `stride` is reached.
    pub fn stage_strides(&self) -> Result<Vec<usize>, ConfigError> {
        if self.stride < 2 || !self.stride.is_power_of_two() {
            return Err(ConfigError(format!("stride {} must be a power of two >= 2", self.stride)));
        }
        let mut remaining = self.stride / 2;
        let strides: Vec<usize> = self
            .encoder
            .stages
            .iter()
            .enumerate()
            .map(|(i, _)| {
                if i > 0 && remaining > 1 {
                    remaining /= 2;
                    2
                } else {
                    1
                }
            })
            .collect();
        if remaining > 1 {
            return Err(ConfigError(format!(
                "stride {} needs more than {} encoder stages",
                self.stride,
                self.encoder.stages.len()
            )));
        }
        Ok(strides)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError(m.to_string()));
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if self.iters < 1 {
            return bad("iters must be at least 1");
        }
        if self.levels < 1 {
            return bad("levels must be at least 1");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if self.channels == 0 || self.mixer_hidden == 0 || self.mixer_depth == 0 {
            return bad("channels, mixer_hidden and mixer_depth must be positive");
        }
        if self.token_expansion == 0 || self.channel_expansion == 0 {
            return bad("mixer expansions must be positive");
        }
        if !(self.enc_scale > 0.0) {
            return bad("enc_scale must be positive");
        }
        if self.encoder.stages.is_empty() || self.encoder.stages.iter().any(|s| s.blocks == 0 || s.channels == 0) {
            return bad("encoder needs at least one non-empty stage");
        }
        self.stage_strides().map(|_| ())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_dimensions() {
        let c = ModelConfig::paper();
        assert_eq!(c.patch(), 7);
        assert_eq!(c.corr_dim(), 196);
        assert_eq!(c.head_dim(), 2064);
        assert_eq!(c.enc_dim(), 64);
        assert_eq!(c.token_dim(), 256 + 196 + 64);
        assert_eq!(c.stage_strides().unwrap(), vec![1, 2, 2]);
        c.validate().unwrap();
    }

    #[test]
    fn stride_four_drops_the_last_downsampling() {
        let mut c = ModelConfig::paper();
        c.stride = 4;
        assert_eq!(c.stage_strides().unwrap(), vec![1, 2, 1]);
        c.stride = 16;
        assert!(c.stage_strides().is_err());
        c.stride = 6;
        assert!(c.validate().is_err());
    }

    #[test]
    fn rejects_out_of_range_gamma() {
        let mut c = ModelConfig::toy();
        c.gamma = 0.0;
        assert!(c.validate().is_err());
        c.gamma = 1.0;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut v = serde_json::to_value(ModelConfig::toy()).unwrap();
        v["itres"] = serde_json::json!(3);
        let err = serde_json::from_value::<ModelConfig>(v).unwrap_err();
        assert!(err.to_string().contains("itres"));
    }
}
