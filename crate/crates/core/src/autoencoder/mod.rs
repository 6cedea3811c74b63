//! First training stage: KL-regularized convolutional autoencoder with a
//! patch discriminator.

mod losses;
mod model;
mod train;

pub use losses::{
    discriminator_objective, generator_adv_loss, kl_loss, recon_loss, stage1_losses, Stage1Losses,
};
pub use model::{Autoencoder, Decoder, Discriminator, Encoder, LatentParams};
pub use train::{train_stage1, EpochStats, Stage1Data, Stage1Trainer, StepLosses, TrainOptions};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture and loss weights of the first stage (`[model]` section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AutoencoderConfig {
    /// Square input side length in pixels.
    pub image_size: usize,
    /// Width of the full-resolution stem (C′).
    pub base_channels: usize,
    /// Width after the first downsampling (C″).
    pub mid_channels: usize,
    /// Latent channels `c`.
    pub latent_channels: usize,
    /// Number of ResBlock + Downsample stages `m`.
    pub downsample_stages: usize,
    pub norm_groups: usize,
    pub disc_channels: usize,
    pub lambda_adv: f64,
    pub lambda_reg: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            base_channels: 16,
            mid_channels: 32,
            latent_channels: 4,
            downsample_stages: 3,
            norm_groups: 8,
            disc_channels: 16,
            lambda_adv: 0.5,
            lambda_reg: 1e-6,
            learning_rate: 1e-3,
            batch_size: 16,
        }
    }
}

impl AutoencoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.downsample_stages == 0 {
            return bad("downsample_stages must be at least 1".into());
        }
        if self.lambda_adv < 0.0 || self.lambda_reg < 0.0 {
            return bad("loss weights must be nonnegative".into());
        }
        if self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return bad("batch_size and learning_rate must be positive".into());
        }
        for (name, ch) in [
            ("base_channels", self.base_channels),
            ("mid_channels", self.mid_channels),
            ("disc_channels (doubled)", 2 * self.disc_channels),
        ] {
            if ch == 0 || ch % self.norm_groups != 0 {
                return bad(format!("{name} = {ch} not divisible by norm_groups {}", self.norm_groups));
            }
        }
        if self.latent_channels == 0 {
            return bad("latent_channels must be positive".into());
        }
        self.latent_dims(self.image_size, self.image_size)?;
        Ok(())
    }

    /// Latent `(c, h, w)` for an `H×W` input.
    pub fn latent_dims(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        let f = 1usize << self.downsample_stages;
        if height == 0 || width == 0 || height % f != 0 || width % f != 0 {
            return Err(Error::Shape(format!(
                "{height}×{width} input is not divisible by 2^{} = {f}",
                self.downsample_stages
            )));
        }
        Ok((self.latent_channels, height / f, width / f))
    }

    /// Latent element count over image element count (RGB).
    pub fn compression_ratio(&self, height: usize, width: usize) -> Result<f64> {
        let (c, h, w) = self.latent_dims(height, width)?;
        Ok((c * h * w) as f64 / (height * width * 3) as f64)
    }
}
