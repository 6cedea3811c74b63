//! Second training stage: forward noising of latents, the noise-predicting
//! U-Net and the ancestral reverse step.

mod train;
mod unet;

pub use train::{train_stage2, LatentSource, Stage2Trainer, Stage2Epoch};
pub use unet::{DenoiserModel, NoisePredictor};

use candle_core::{DType, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::latent::{LatentTensor, Stage};
use crate::rng::GaussianSource;
use crate::schedule::{NoiseSchedule, ScheduleParams};
use crate::{Error, Result};

/// Standard deviation of the noise injected by a reverse step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaChoice {
    /// `σ_t = √β̃_t`.
    #[default]
    Posterior,
    /// `σ_t = √β_t`.
    Beta,
}

/// Which encoder output the second stage trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LatentMode {
    /// Reparameterized draw `μ + σ ⊙ ε`.
    #[default]
    Sample,
    /// Posterior mean only.
    Mean,
}

/// Schedule, U-Net shape and optimization settings (`[diffusion]` section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub base_channels: usize,
    /// Width multiplier per resolution level.
    pub channel_mult: Vec<usize>,
    pub attention: bool,
    pub norm_groups: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,
    pub sigma: SigmaChoice,
    pub latent_mode: LatentMode,
    /// Latents drawn per epoch when training on synthetic Gaussian data.
    pub gaussian_samples: usize,
    /// Decay of the weight average used for inference; 0 disables it.
    pub ema_decay: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            base_channels: 64,
            channel_mult: vec![1, 2],
            attention: true,
            norm_groups: 8,
            learning_rate: 9.6e-5,
            batch_size: 8,
            epochs: 20,
            lr_floor: 0.1,
            sigma: SigmaChoice::Posterior,
            latent_mode: LatentMode::Sample,
            gaussian_samples: 2048,
            ema_decay: 0.999,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule_params(&self) -> ScheduleParams {
        ScheduleParams {
            steps: self.steps,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        self.schedule_params().build()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.channel_mult.is_empty() || self.channel_mult.contains(&0) {
            return bad("channel_mult must be a nonempty list of positive multipliers");
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return bad("base_channels must be positive and even");
        }
        for m in &self.channel_mult {
            if (self.base_channels * m) % self.norm_groups != 0 {
                return bad("every level width must be divisible by norm_groups");
            }
        }
        if self.batch_size == 0 || self.epochs == 0 || !(self.learning_rate > 0.0) {
            return bad("batch_size, epochs and learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_floor) {
            return bad("lr_floor must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `√ᾱ · z0 + √(1−ᾱ) · ε` for a single cumulative coefficient.
pub fn forward_mix(z0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if z0.dims() != eps.dims() {
        return Err(Error::Shape(format!("z0 {:?} vs noise {:?}", z0.dims(), eps.dims())));
    }
    Ok(((z0 * alpha_bar.sqrt())? + (eps * (1.0 - alpha_bar).sqrt())?)?)
}

/// Closed-form marginal `q(z_t | z0)` for the whole batch at step `t`.
pub fn forward_diffuse(z0: &LatentTensor, t: usize, eps: &LatentTensor, s: &NoiseSchedule) -> Result<LatentTensor> {
    s.check_step(t)?;
    let out = forward_mix(z0.tensor(), eps.tensor(), s.alpha_bar(t))?;
    z0.with_data(out, Stage::Denoising(t))
}

/// Per-item version of [`forward_mix`]: item `i` uses `ᾱ_{t_i}`.
fn forward_mix_items(z0: &Tensor, eps: &Tensor, t: &[usize], s: &NoiseSchedule) -> Result<Tensor> {
    let n = t.len();
    let mut shape = vec![n];
    shape.extend(std::iter::repeat(1).take(z0.rank() - 1));
    let a: Vec<f64> = t.iter().map(|&t| s.alpha_bar(t).sqrt()).collect();
    let b: Vec<f64> = t.iter().map(|&t| (1.0 - s.alpha_bar(t)).sqrt()).collect();
    let dev = z0.device();
    let a = Tensor::from_vec(a, shape.as_slice(), dev)?.to_dtype(z0.dtype())?;
    let b = Tensor::from_vec(b, shape.as_slice(), dev)?.to_dtype(z0.dtype())?;
    Ok((z0.broadcast_mul(&a)? + eps.broadcast_mul(&b)?)?)
}

/// Noise-prediction loss for explicit per-item steps and noise: the batch
/// mean of `‖ε − ε̂(z_t, t)‖²`. Runs in the model dtype and stays
/// differentiable in the model parameters.
pub fn diffusion_loss_with(
    model: &impl NoisePredictor,
    z0: &Tensor,
    t: &[usize],
    eps: &Tensor,
    s: &NoiseSchedule,
) -> Result<Tensor> {
    let n = z0.dim(0)?;
    if t.len() != n {
        return Err(Error::Shape(format!("{} steps for a batch of {n}", t.len())));
    }
    for &step in t {
        s.check_step(step)?;
    }
    let z0 = z0.to_dtype(model.dtype())?;
    let eps = eps.to_dtype(model.dtype())?;
    let z_t = forward_mix_items(&z0, &eps, t, s)?;
    let pred = model.forward_eps(&z_t, t)?;
    let per_item = (eps - pred)?.sqr()?.flatten_from(1)?.sum(1)?;
    Ok(per_item.mean_all()?)
}

/// Draws `t ~ U{1..T}` and `ε ~ N(0, I)` per item, then evaluates
/// [`diffusion_loss_with`].
pub fn diffusion_loss<R: Rng + GaussianSource>(
    model: &impl NoisePredictor,
    z0: &Tensor,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<Tensor> {
    let n = z0.dim(0)?;
    let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=s.steps())).collect();
    let eps = rng.standard_normal(z0.shape(), model.dtype(), z0.device())?;
    diffusion_loss_with(model, z0, &t, &eps, s)
}

/// ε̂ for a latent batch at a common step.
pub fn denoiser_predict(m: &impl NoisePredictor, z_t: &LatentTensor, t: usize) -> Result<LatentTensor> {
    let eps = m.predict_eps(z_t.tensor(), &vec![t; z_t.batch()])?;
    LatentTensor::new(eps, z_t.stage())
}

/// Scalar coefficients of one reverse step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoeffs {
    pub alpha: f64,
    pub alpha_bar: f64,
    pub sigma: f64,
}

impl ReverseCoeffs {
    pub fn at(s: &NoiseSchedule, t: usize, choice: SigmaChoice) -> Result<Self> {
        s.check_step(t)?;
        let var = match choice {
            SigmaChoice::Posterior => s.posterior_var(t),
            SigmaChoice::Beta => s.beta(t),
        };
        Ok(Self {
            alpha: s.alpha(t),
            alpha_bar: s.alpha_bar(t),
            sigma: var.sqrt(),
        })
    }
}

/// `(z_t − (1−α)/√(1−ᾱ) · ε̂) / √α + σ · y`; without `y` the update is the
/// deterministic posterior mean.
pub fn reverse_update(z_t: &Tensor, eps_hat: &Tensor, c: ReverseCoeffs, y: Option<&Tensor>) -> Result<Tensor> {
    if z_t.dims() != eps_hat.dims() {
        return Err(Error::Shape(format!("z_t {:?} vs ε̂ {:?}", z_t.dims(), eps_hat.dims())));
    }
    let one_minus_bar = 1.0 - c.alpha_bar;
    // ᾱ = 1 forces α = 1, where the noise term carries no weight.
    let coef = if one_minus_bar > 0.0 {
        (1.0 - c.alpha) / one_minus_bar.sqrt()
    } else {
        0.0
    };
    let mean = ((z_t - (eps_hat * coef)?)? / c.alpha.sqrt())?;
    Ok(match y {
        Some(y) => (mean + (y * c.sigma)?)?,
        None => mean,
    })
}

/// One ancestral step `z_t → z_{t−1}`. Noise is injected for `t > 1` only.
pub fn reverse_step(
    m: &impl NoisePredictor,
    z_t: &LatentTensor,
    t: usize,
    s: &NoiseSchedule,
    sigma: SigmaChoice,
    noise: &mut impl GaussianSource,
) -> Result<LatentTensor> {
    let c = ReverseCoeffs::at(s, t, sigma)?;
    let x = z_t.tensor();
    let eps = m.predict_eps(x, &vec![t; z_t.batch()])?;
    let y = if t > 1 {
        Some(noise.standard_normal(x.shape(), DType::F64, x.device())?)
    } else {
        None
    };
    let out = reverse_update(x, &eps, c, y.as_ref())?;
    let stage = if t > 1 { Stage::Denoising(t - 1) } else { Stage::Denoised };
    z_t.with_data(out, stage)
}

/// Applies [`reverse_step`] for `t = t_start, …, 1`; `hook` sees every
/// intermediate latent together with the step that produced it.
pub fn denoise(
    m: &impl NoisePredictor,
    z_start: &LatentTensor,
    t_start: usize,
    s: &NoiseSchedule,
    sigma: SigmaChoice,
    noise: &mut impl GaussianSource,
    hook: &mut dyn FnMut(usize, &LatentTensor),
) -> Result<LatentTensor> {
    s.check_step(t_start)?;
    let mut z = z_start.clone().with_stage(Stage::Denoising(t_start));
    for t in (1..=t_start).rev() {
        z = reverse_step(m, &z, t, s, sigma, noise)?;
        hook(t, &z);
    }
    Ok(z)
}
