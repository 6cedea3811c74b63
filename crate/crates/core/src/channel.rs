//! Physical link: transmitter power constraint, AWGN corruption and
//! receiver-side power normalization.
//!
//! Every real latent element is one channel use. Noise is real Gaussian with
//! variance `P / 10^(snr_db/10)` and the channel gain is fixed to 1.

use candle_core::{Device, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::latent::{LatentTensor, Stage};
use crate::rng::GaussianSource;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// How the receiver rescales the corrupted latent before de-noising.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormMode {
    /// `φ = 1 / (sqrt(10^(-snr/10)) · ‖z̃‖)`, applied verbatim.
    PaperNorm,
    /// Scale so the noise component has the marginal variance `1 − ᾱ_t*` of
    /// the SNR-matched diffusion step.
    #[default]
    MatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(rename = "P")]
    pub power: f64,
    pub snr_db: f64,
    /// Channel noise seed; derived from the master seed when absent.
    pub seed: Option<u64>,
    pub norm_mode: NormMode,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            power: 1.0,
            snr_db: 10.0,
            seed: None,
            norm_mode: NormMode::MatchNorm,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::Config(format!(
                "channel power must be positive, got {}",
                self.power
            )));
        }
        if self.snr_db.is_nan() {
            return Err(Error::Config("channel snr_db is NaN".into()));
        }
        Ok(())
    }

    pub fn with_snr(&self, snr_db: f64) -> Self {
        Self {
            snr_db,
            ..self.clone()
        }
    }

    /// Per-element noise variance `σ² = P / SNR_linear`.
    pub fn noise_variance(&self) -> f64 {
        self.power / db_to_linear(self.snr_db)
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

fn scale_rows(z: &LatentTensor, factors: &[f64], stage: Stage) -> Result<LatentTensor> {
    let n = z.batch();
    let f = Tensor::from_vec(factors.to_vec(), (n, 1), z.tensor().device())?;
    let scaled = z.rows()?.broadcast_mul(&f)?.reshape(z.dims())?;
    z.with_data(scaled, stage)
}

fn nonzero_norms(z: &LatentTensor) -> Result<Vec<f64>> {
    let norms = z.item_norm()?;
    if norms.iter().any(|&n| n == 0.0 || !n.is_finite()) {
        return Err(Error::ZeroNorm);
    }
    Ok(norms)
}

/// `sqrt(k·P) · z / ‖z‖` per item, so each item's mean square equals `P`.
pub fn power_normalize(z: &LatentTensor, power: f64) -> Result<LatentTensor> {
    if !(power > 0.0) {
        return Err(Error::Domain(format!("power must be positive, got {power}")));
    }
    let norms = nonzero_norms(z)?;
    let k = z.item_len() as f64;
    let factors: Vec<f64> = norms.iter().map(|n| (k * power).sqrt() / n).collect();
    scale_rows(z, &factors, Stage::Normalized)
}

/// Adds i.i.d. `N(0, σ²)` noise to every element.
pub fn awgn_transmit(
    z_nor: &LatentTensor,
    cfg: &ChannelConfig,
    noise: &mut impl GaussianSource,
) -> Result<LatentTensor> {
    cfg.validate()?;
    let t = z_nor.tensor();
    let n = noise.standard_normal(t.shape(), t.dtype(), t.device())?;
    let sigma = cfg.noise_variance().sqrt();
    let out = (t + (n * sigma)?)?;
    z_nor.with_data(out, Stage::Received)
}

/// Rescales the received latent for the de-noiser. Returns the scaled latent
/// and the SNR-matched start step `t*` (the default step count for either
/// mode).
pub fn receiver_normalize(
    z_tilde: &LatentTensor,
    cfg: &ChannelConfig,
    schedule: &NoiseSchedule,
) -> Result<(LatentTensor, usize)> {
    cfg.validate()?;
    let t_star = schedule.snr_to_start_step(cfg.snr_db);
    let factors = match cfg.norm_mode {
        NormMode::PaperNorm => {
            let norms = nonzero_norms(z_tilde)?;
            let root = (1.0 / db_to_linear(cfg.snr_db)).sqrt();
            norms.iter().map(|n| 1.0 / (root * n)).collect()
        }
        NormMode::MatchNorm => {
            nonzero_norms(z_tilde)?;
            let gamma = match_norm_gain(cfg, schedule, t_star);
            vec![gamma; z_tilde.batch()]
        }
    };
    Ok((scale_rows(z_tilde, &factors, Stage::Received)?, t_star))
}

/// `γ = sqrt((1 − ᾱ_t) / σ²)`: maps per-element channel noise of variance σ²
/// onto the step-`t` marginal noise variance.
pub fn match_norm_gain(cfg: &ChannelConfig, schedule: &NoiseSchedule, t: usize) -> f64 {
    ((1.0 - schedule.alpha_bar(t)) / cfg.noise_variance()).sqrt()
}

/// Convenience for tests and tools: a single-item latent from raw values.
pub fn latent_from_slice(values: &[f64]) -> Result<LatentTensor> {
    let t = Tensor::from_vec(values.to_vec(), Shape::from((1, values.len())), &Device::Cpu)?;
    LatentTensor::new(t, Stage::Clean)
}
