use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network hyper-parameters.
///
/// Encoder stage `i` turns a `g x g` grid into `g / patch_sizes[i]`, so
/// `resolution` must be divisible by the product of the patch sizes. The
/// decoder runs on the stage-2 grid and doubles it after each stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub resolution: usize,
    pub patch_sizes: [usize; 4],
    pub stage_channels: [usize; 4],
    pub depths: [usize; 4],
    pub n_heads: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub consensus_dim: usize,
    pub decoder_channels: [usize; 3],
    pub decoder_depths: [usize; 3],
    pub decoder_heads: [usize; 3],
    pub si_ratios: [usize; 3],
    pub mlp_ratio: usize,
    /// Sharpness of the per-image softmax over affinity scores.
    pub affinity_temperature: f64,
    /// Foreground probability the untrained model predicts everywhere; the
    /// head bias starts at its logit. `0.5` keeps the bias at zero.
    pub head_prior: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// 16-pixel configuration for fast tests.
    pub fn tiny() -> Self {
        Self {
            resolution: 16,
            patch_sizes: [2, 2, 2, 2],
            stage_channels: [8, 8, 16, 16],
            depths: [1, 1, 1, 1],
            n_heads: [1, 2, 2, 4],
            sr_ratios: [2, 1, 1, 1],
            consensus_dim: 8,
            decoder_channels: [8, 8, 8],
            decoder_depths: [1, 1, 1],
            decoder_heads: [2, 1, 2],
            si_ratios: [2, 2, 2],
            mlp_ratio: 2,
            affinity_temperature: 5.0,
            head_prior: 0.5,
        }
    }

    /// 64-pixel configuration used for tests and desk-scale runs.
    pub fn toy() -> Self {
        Self {
            resolution: 64,
            patch_sizes: [4, 2, 2, 2],
            stage_channels: [32, 64, 128, 256],
            depths: [2, 2, 2, 2],
            n_heads: [1, 2, 4, 8],
            sr_ratios: [8, 4, 2, 1],
            consensus_dim: 128,
            decoder_channels: [64, 32, 32],
            decoder_depths: [1, 1, 1],
            decoder_heads: [2, 1, 1],
            si_ratios: [2, 2, 2],
            mlp_ratio: 4,
            affinity_temperature: 5.0,
            head_prior: 0.5,
        }
    }

    /// 256-pixel configuration with PVTv2-b2-like widths.
    pub fn full() -> Self {
        Self {
            resolution: 256,
            patch_sizes: [4, 2, 2, 2],
            stage_channels: [64, 128, 320, 512],
            depths: [3, 4, 6, 3],
            n_heads: [1, 2, 5, 8],
            sr_ratios: [8, 4, 2, 1],
            consensus_dim: 256,
            decoder_channels: [256, 128, 64],
            decoder_depths: [2, 2, 2],
            decoder_heads: [8, 4, 2],
            si_ratios: [2, 2, 2],
            mlp_ratio: 4,
            affinity_temperature: 5.0,
            head_prior: 0.5,
        }
    }

    /// Side length of the token grid after each encoder stage.
    pub fn stage_grids(&self) -> [usize; 4] {
        let mut g = self.resolution;
        self.patch_sizes.map(|p| {
            g /= p.max(1);
            g
        })
    }

    /// Side length of the token grid in each decoder stage.
    pub fn decoder_grids(&self) -> [usize; 3] {
        let g = self.stage_grids()[1];
        [g, 2 * g, 4 * g]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let counts = self
            .patch_sizes
            .iter()
            .chain(&self.stage_channels)
            .chain(&self.depths)
            .chain(&self.n_heads)
            .chain(&self.sr_ratios)
            .chain(&self.decoder_channels)
            .chain(&self.decoder_heads)
            .chain(&self.si_ratios)
            .chain([&self.consensus_dim, &self.mlp_ratio, &self.resolution]);
        if counts.into_iter().any(|&c| c == 0) {
            return bad("all sizes, counts and ratios must be >= 1".into());
        }
        let mut g = self.resolution;
        for (i, &p) in self.patch_sizes.iter().enumerate() {
            if g % p != 0 {
                return bad(format!(
                    "stage {} grid {g} is not divisible by patch size {p}; resolution must be a multiple of {}",
                    i + 1,
                    self.patch_sizes.iter().product::<usize>()
                ));
            }
            g /= p;
            if g % self.sr_ratios[i] != 0 {
                return bad(format!("stage {} grid {g} is not divisible by sr ratio {}", i + 1, self.sr_ratios[i]));
            }
            if self.stage_channels[i] % self.n_heads[i] != 0 {
                return bad(format!(
                    "stage {} width {} is not divisible by {} heads",
                    i + 1,
                    self.stage_channels[i],
                    self.n_heads[i]
                ));
            }
        }
        for i in 0..3 {
            if self.decoder_channels[i] % self.decoder_heads[i] != 0 {
                return bad(format!(
                    "decoder stage {} width {} is not divisible by {} heads",
                    i + 1,
                    self.decoder_channels[i],
                    self.decoder_heads[i]
                ));
            }
        }
        if !(self.affinity_temperature.is_finite() && self.affinity_temperature > 0.0) {
            return bad(format!("affinity_temperature must be positive, got {}", self.affinity_temperature));
        }
        if !(self.head_prior > 0.0 && self.head_prior < 1.0) {
            return bad(format!("head_prior must lie in (0, 1), got {}", self.head_prior));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_grids() {
        let cfg = ModelConfig::toy();
        cfg.validate().unwrap();
        assert_eq!(cfg.stage_grids(), [16, 8, 4, 2]);
        assert_eq!(cfg.decoder_grids(), [8, 16, 32]);
        ModelConfig::full().validate().unwrap();
    }

    #[test]
    fn indivisible_resolution_is_rejected() {
        let cfg = ModelConfig {
            resolution: 60,
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            n_heads: [3, 2, 4, 8],
            ..ModelConfig::toy()
        };
        assert!(cfg.validate().is_err());
    }
}
