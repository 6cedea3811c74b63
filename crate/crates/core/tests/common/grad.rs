//! Analytic gradients against central finite differences in f64.

use candle_core::{DType, Device, Tensor, Var};
use dnsc_core::autoencoder::{generator_adv_loss, kl_loss, recon_loss, Autoencoder, AutoencoderConfig, LatentParams};
use dnsc_core::diffusion::{diffusion_loss_with, DenoiserModel, DiffusionConfig};
use dnsc_core::rng::{stream, GaussianSource};

const STEP: f64 = 1e-4;
pub const TOL: f64 = 1e-3;
const SLICE: usize = 10;

fn tiny_ae() -> Autoencoder {
    let cfg = AutoencoderConfig {
        image_size: 16,
        base_channels: 8,
        mid_channels: 8,
        latent_channels: 4,
        downsample_stages: 2,
        norm_groups: 4,
        disc_channels: 8,
        ..Default::default()
    };
    Autoencoder::new(&cfg, 3, DType::F64).unwrap()
}

fn images(n: usize, size: usize, seed: u64) -> Tensor {
    let mut rng = stream(seed, "grad/images", 0);
    let x = rng.standard_normal(&(n, 3, size, size).into(), DType::F64, &Device::Cpu).unwrap();
    (x * 0.5).unwrap().tanh().unwrap()
}

fn find(vars: &[(String, Var)], name_part: &str) -> Var {
    vars.iter()
        .find(|(n, v)| n.contains(name_part) && v.elem_count() >= SLICE)
        .unwrap_or_else(|| panic!("no parameter matching {name_part}: {:?}", vars.iter().map(|(n, _)| n).collect::<Vec<_>>()))
        .1
        .clone()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

/// Compares the analytic gradient of `loss` on 10 evenly spaced entries of
/// `var` with central differences; returns the slice relative error.
fn check(var: &Var, loss: impl Fn() -> Tensor) -> f64 {
    let l = loss();
    let grads = l.backward().unwrap();
    let analytic: Vec<f64> = grads
        .get(var.as_tensor())
        .expect("parameter receives a gradient")
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
    let stride = base.len() / SLICE;
    let (mut num2, mut diff2) = (0.0, 0.0);
    for j in 0..SLICE {
        let i = j * stride + stride / 2;
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            var.set(&Tensor::from_vec(v, var.shape(), &Device::Cpu).unwrap()).unwrap();
            scalar(&loss())
        };
        let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        num2 += numeric * numeric;
        diff2 += (numeric - analytic[i]).powi(2);
    }
    var.set(&Tensor::from_vec(base, var.shape(), &Device::Cpu).unwrap()).unwrap();
    assert!(num2 > 0.0, "gradient slice is identically zero");
    (diff2 / num2).sqrt()
}

/// `μ + σ·ε` with a fixed `ε`, so the loss is a deterministic function.
fn reparam(p: &LatentParams, eps: &Tensor) -> Tensor {
    (&p.mu + (p.sigma().unwrap() * eps).unwrap()).unwrap()
}

pub fn recon_error() -> f64 {
    let ae = tiny_ae();
    let x = images(2, 16, 1);
    let eps = stream(1, "grad/eps", 0)
        .standard_normal(&ae.latent_shape(2).unwrap().into(), DType::F64, &Device::Cpu)
        .unwrap();
    let var = find(&ae.generator_vars(), "encoder");
    check(&var, || {
        let p = ae.encoder.forward(&x).unwrap();
        recon_loss(&x, &ae.decoder.forward(&reparam(&p, &eps)).unwrap()).unwrap()
    })
}

pub fn kl_error() -> f64 {
    let ae = tiny_ae();
    let x = images(2, 16, 2);
    let var = find(&ae.generator_vars(), "encoder");
    check(&var, || kl_loss(&ae.encoder.forward(&x).unwrap()).unwrap())
}

pub fn adversarial_error() -> f64 {
    let ae = tiny_ae();
    let x = images(2, 16, 3);
    let eps = stream(3, "grad/eps", 0)
        .standard_normal(&ae.latent_shape(2).unwrap().into(), DType::F64, &Device::Cpu)
        .unwrap();
    let var = find(&ae.generator_vars(), "decoder");
    check(&var, || {
        let p = ae.encoder.forward(&x).unwrap();
        let x_rec = ae.decoder.forward(&reparam(&p, &eps)).unwrap();
        generator_adv_loss(&ae.discriminator.forward(&x_rec).unwrap()).unwrap()
    })
}

/// Worst slice error over time-embedding, encoder-path and decoder-path weights.
pub fn noise_prediction_error() -> f64 {
    let cfg = DiffusionConfig {
        steps: 50,
        base_channels: 8,
        norm_groups: 4,
        ..Default::default()
    };
    let shape = (4, 4, 4);
    let m = DenoiserModel::new(&cfg, shape, 5, DType::F64).unwrap();
    let s = cfg.schedule().unwrap();
    let mut rng = stream(5, "grad/diffusion", 0);
    // Zero-initialized layers block gradients to everything upstream; check at a generic point.
    for (_, v) in m.store().vars() {
        let jitter = rng.standard_normal(v.shape(), DType::F64, &Device::Cpu).unwrap();
        v.set(&(v.as_tensor() + (jitter * 0.05).unwrap()).unwrap()).unwrap();
    }
    let z0 = rng.standard_normal(&(3, 4, 4, 4).into(), DType::F64, &Device::Cpu).unwrap();
    let eps = rng.standard_normal(&(3, 4, 4, 4).into(), DType::F64, &Device::Cpu).unwrap();
    let t = [1, 25, 50];
    ["time", "down", "up"]
        .into_iter()
        .map(|part| {
            let var = find(&m.store().vars(), part);
            check(&var, || diffusion_loss_with(&m, &z0, &t, &eps, &s).unwrap())
        })
        .fold(0.0, f64::max)
}
