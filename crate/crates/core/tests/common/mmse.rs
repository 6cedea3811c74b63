//! A denoiser trained on standard Gaussian latents against the closed-form
//! MMSE predictor `ε̂* = √(1 − ᾱ_t)·z_t`.

use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use dnsc_core::diffusion::{forward_mix, DenoiserModel, DiffusionConfig, LatentSource, NoisePredictor, Stage2Trainer};
use dnsc_core::rng::{stream, GaussianSource};
use dnsc_core::NoiseSchedule;

pub const SHAPE: (usize, usize, usize) = (4, 2, 2);
pub const CHECK_STEPS: [usize; 3] = [10, 100, 190];
pub const HELD_OUT: usize = 4096;

pub fn config() -> DiffusionConfig {
    DiffusionConfig {
        steps: 200,
        base_channels: 16,
        channel_mult: vec![1, 2],
        attention: false,
        norm_groups: 8,
        learning_rate: 1e-3,
        batch_size: 256,
        epochs: 60,
        lr_floor: 0.01,
        gaussian_samples: 16384,
        ema_decay: 0.999,
        ..Default::default()
    }
}

/// Relative L2 error `‖ε̂ − ε̂*‖ / ‖ε̂*‖` over `n` held-out latents at step `t`.
pub fn relative_error(m: &impl NoisePredictor, s: &NoiseSchedule, t: usize, n: usize) -> f64 {
    let (c, h, w) = SHAPE;
    let mut rng = stream(99, "mmse/held-out", t as u64);
    let z0 = rng.standard_normal(&(n, c, h, w).into(), DType::F64, &Device::Cpu).unwrap();
    let eps = rng.standard_normal(&(n, c, h, w).into(), DType::F64, &Device::Cpu).unwrap();
    let ab = s.alpha_bar(t);
    let z_t = forward_mix(&z0, &eps, ab).unwrap();
    let ideal = (&z_t * (1.0 - ab).sqrt()).unwrap();
    let pred = m.predict_eps(&z_t, &vec![t; n]).unwrap();
    let norm = |x: &Tensor| x.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
    norm(&(&pred - &ideal).unwrap()) / norm(&ideal)
}

pub struct MmseRun {
    pub errors: Vec<f64>,
    pub mean: f64,
    pub seconds: f64,
}

/// Trains with [`config`] and scores the inference weights.
pub fn run() -> MmseRun {
    let cfg = config();
    let start = Instant::now();
    let source = LatentSource::Gaussian {
        shape: SHAPE,
        count: cfg.gaussian_samples,
    };
    let mut trainer = Stage2Trainer::new(&cfg, SHAPE, 7, DType::F32, None).unwrap();
    trainer.run(&source).unwrap();
    let model = DenoiserModel::from_checkpoint(&trainer.checkpoint().unwrap(), DType::F32).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let errors: Vec<f64> = CHECK_STEPS
        .iter()
        .map(|&t| relative_error(&model, trainer.schedule(), t, HELD_OUT))
        .collect();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    MmseRun { errors, mean, seconds }
}
