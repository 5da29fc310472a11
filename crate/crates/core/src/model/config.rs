use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VitConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            patch_size: 4,
            embed_dim: 64,
            heads: 2,
            layers: 1,
            mlp_ratio: 2,
        }
    }
}

/// Architecture hyperparameters of the hybrid encoder / transformer / decoder network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Input channels: T1, T1ce, T2, FLAIR.
    pub in_modalities: usize,
    /// Output classes: background, edema, tumour core, enhancing tumour.
    pub num_classes: usize,
    pub base_channels: usize,
    pub encoder_levels: usize,
    pub vit: VitConfig,
    /// Cubic spatial extent of the network input.
    pub input_extent: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}

impl ModelConfig {
    /// CPU-sized default: 32³ input, two encoder levels, base width 8.
    pub fn desk() -> Self {
        ModelConfig {
            in_modalities: 4,
            num_classes: 4,
            base_channels: 8,
            encoder_levels: 2,
            vit: VitConfig::default(),
            input_extent: 32,
        }
    }

    /// Full-resolution 128³ configuration; constructible but not trained here.
    pub fn paper() -> Self {
        ModelConfig {
            in_modalities: 4,
            num_classes: 4,
            base_channels: 16,
            encoder_levels: 4,
            vit: VitConfig {
                patch_size: 8,
                embed_dim: 256,
                heads: 4,
                layers: 1,
                mlp_ratio: 2,
            },
            input_extent: 128,
        }
    }

    /// Smallest useful network, 8³ input, for gradient checks.
    pub fn micro() -> Self {
        ModelConfig {
            in_modalities: 4,
            num_classes: 4,
            base_channels: 2,
            encoder_levels: 2,
            vit: VitConfig {
                patch_size: 1,
                embed_dim: 4,
                heads: 2,
                layers: 1,
                mlp_ratio: 2,
            },
            input_extent: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::ModelConfig(msg));
        for (name, value) in [
            ("in_modalities", self.in_modalities),
            ("num_classes", self.num_classes),
            ("base_channels", self.base_channels),
            ("encoder_levels", self.encoder_levels),
            ("input_extent", self.input_extent),
            ("vit.patch_size", self.vit.patch_size),
            ("vit.embed_dim", self.vit.embed_dim),
            ("vit.heads", self.vit.heads),
            ("vit.layers", self.vit.layers),
            ("vit.mlp_ratio", self.vit.mlp_ratio),
        ] {
            if value == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        let downsample = 1usize
            .checked_shl(self.encoder_levels as u32)
            .filter(|d| *d <= self.input_extent);
        let Some(downsample) = downsample else {
            return fail(format!(
                "input_extent {} must be divisible by 2^encoder_levels = 2^{}",
                self.input_extent, self.encoder_levels
            ));
        };
        if !self.input_extent.is_multiple_of(downsample) {
            return fail(format!(
                "input_extent {} must be divisible by 2^encoder_levels = {downsample}",
                self.input_extent
            ));
        }
        let bottleneck = self.input_extent / downsample;
        if !bottleneck.is_multiple_of(self.vit.patch_size) {
            return fail(format!(
                "bottleneck extent {bottleneck} must be divisible by vit.patch_size {}",
                self.vit.patch_size
            ));
        }
        if !self.vit.embed_dim.is_multiple_of(self.vit.heads) {
            return fail(format!(
                "vit.embed_dim {} must be divisible by vit.heads {}",
                self.vit.embed_dim, self.vit.heads
            ));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn bottleneck_extent(&self) -> usize {
        self.input_extent >> self.encoder_levels
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels_at(self.encoder_levels - 1)
    }

    pub fn tokens(&self) -> usize {
        (self.bottleneck_extent() / self.vit.patch_size).pow(3)
    }

    pub fn patch_dim(&self) -> usize {
        self.bottleneck_channels() * self.vit.patch_size.pow(3)
    }
}
