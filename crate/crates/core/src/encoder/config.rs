use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of answer options, and so of output logits.
pub const NUM_OPTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Square input side in pixels.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `width`.
    pub mlp_ratio: usize,
    /// Adapter bottleneck width.
    pub bottleneck: usize,
    pub adapter_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 1,
            patch_size: 8,
            width: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            bottleneck: 8,
            adapter_scale: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::invalid("encoder config", m));
        if self.image_size == 0 || self.channels == 0 || self.patch_size == 0 {
            return fail("image_size, channels and patch_size must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail(format!(
                "width {} is not divisible by heads {}",
                self.width, self.heads
            ));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return fail("layers and mlp_ratio must be positive".into());
        }
        if self.bottleneck == 0 {
            return fail("bottleneck must be at least 1".into());
        }
        if !self.adapter_scale.is_finite() {
            return fail("adapter_scale must be finite".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.width * self.mlp_ratio
    }
}

/// `L * T * (2dr + r + d) + (5d + 5)`: every adapter plus the option head.
pub fn trainable_param_formula(layers: usize, types: usize, width: usize, bottleneck: usize) -> usize {
    layers * types * (2 * width * bottleneck + bottleneck + width) + (NUM_OPTIONS * width + NUM_OPTIONS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// When false only the head is updated and adapters stay at zero.
    pub train_adapters: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            steps: 2000,
            batch_size: 32,
            seed: 0,
            train_adapters: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid("train config", "learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("train config", "batch_size must be positive"));
        }
        Ok(())
    }
}
