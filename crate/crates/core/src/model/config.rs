use serde::{Deserialize, Serialize};

use crate::degradation::check_scale;
use crate::error::{invalid, Result};

/// What the denoise module is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MnmMode {
    /// Per-pixel noise map from the extractor.
    NoiseMap,
    /// One noise level per image, broadcast to a constant map.
    NoiseScalar,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub n_groups: usize,
    pub n_rcab_per_group: usize,
    pub ca_reduction: usize,
    pub kernel_size: usize,
    pub blur_kernel_size: usize,
    pub embed_dim: usize,
    pub scale: usize,
    /// Number of chained deblur modules; 0 disables the module.
    pub n_mbm: usize,
    pub mnm_mode: MnmMode,
    pub mnm_kernel_size: usize,
    pub extractor_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full(4)
    }
}

impl ModelConfig {
    /// Full-size network: 64 channels, 5 groups of 20 blocks.
    pub fn full(scale: usize) -> Self {
        Self {
            channels: 64,
            n_groups: 5,
            n_rcab_per_group: 20,
            ca_reduction: 16,
            kernel_size: 3,
            blur_kernel_size: 15,
            embed_dim: 15,
            scale,
            n_mbm: 1,
            mnm_mode: MnmMode::NoiseMap,
            mnm_kernel_size: 3,
            extractor_channels: 64,
        }
    }

    /// Desk-scale network used by the gradient and learning checks.
    pub fn tiny(scale: usize) -> Self {
        Self {
            channels: 8,
            n_groups: 1,
            n_rcab_per_group: 2,
            ca_reduction: 4,
            blur_kernel_size: 5,
            embed_dim: 8,
            extractor_channels: 8,
            ..Self::full(scale)
        }
    }

    pub fn kernel_dim(&self) -> usize {
        self.blur_kernel_size * self.blur_kernel_size
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if self.channels == 0 || self.extractor_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        if self.ca_reduction == 0 || self.channels < self.ca_reduction {
            return Err(invalid(format!(
                "channels ({}) must be >= ca_reduction ({})",
                self.channels, self.ca_reduction
            )));
        }
        for (name, k) in [
            ("kernel_size", self.kernel_size),
            ("blur_kernel_size", self.blur_kernel_size),
            ("mnm_kernel_size", self.mnm_kernel_size),
        ] {
            if k % 2 == 0 {
                return Err(invalid(format!("{name} must be odd, got {k}")));
            }
        }
        if self.embed_dim == 0 || self.embed_dim > self.kernel_dim() {
            return Err(invalid(format!(
                "embed_dim {} outside 1..={}",
                self.embed_dim,
                self.kernel_dim()
            )));
        }
        Ok(())
    }

    /// Pixel-shuffle factors of the upsampler.
    pub fn upsample_stages(&self) -> Vec<usize> {
        match self.scale {
            4 => vec![2, 2],
            s => vec![s],
        }
    }
}
