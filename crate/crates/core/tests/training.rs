//! Short training runs: both stages make progress and the discriminator
//! learns to separate real images from poor reconstructions.

use candle_core::{DType, Device, Tensor};
use candle_nn::ops::sigmoid;
use dnsc_core::autoencoder::{discriminator_objective, Autoencoder, AutoencoderConfig, Stage1Data, Stage1Trainer, TrainOptions};
use dnsc_core::diffusion::{DiffusionConfig, LatentSource, Stage2Trainer};
use dnsc_core::harness::{ingest_dataset, synth, Split};
use dnsc_core::optim::{Adam, AdamParams};
use dnsc_core::rng::{stream, GaussianSource};

fn tiny_ae() -> AutoencoderConfig {
    AutoencoderConfig {
        image_size: 16,
        base_channels: 8,
        mid_channels: 8,
        latent_channels: 4,
        downsample_stages: 2,
        norm_groups: 4,
        disc_channels: 8,
        batch_size: 8,
        ..Default::default()
    }
}

fn toy_images(count: usize) -> Tensor {
    let dir = tempfile::tempdir().unwrap();
    synth::generate(dir.path(), count, 16, 3).unwrap();
    let data = ingest_dataset(dir.path(), (16, 16), 0.0).unwrap();
    data.split(Split::Train).unwrap().1
}

#[test]
fn stage1_reconstruction_improves() {
    let images = toy_images(48);
    let data = Stage1Data {
        train: images.narrow(0, 0, 40).unwrap(),
        val: Some(images.narrow(0, 40, 8).unwrap()),
    };
    let opts = TrainOptions {
        epochs: 20,
        patience: 20,
        ..Default::default()
    };
    let mut t = Stage1Trainer::new(&tiny_ae(), &opts, 1, DType::F32).unwrap();
    let before = t.evaluate_recon(data.val.as_ref().unwrap()).unwrap();
    t.run(&data).unwrap();
    let h = t.history();
    let after = h.last().unwrap().val_recon.unwrap();
    assert!(h.last().unwrap().recon < 0.6 * h[0].recon, "{:?}", h);
    assert!(after < 0.6 * before, "validation recon {before} -> {after}");
}

#[test]
fn discriminator_separates_real_from_reconstructed() {
    let x = toy_images(16);
    let ae = Autoencoder::new(&tiny_ae(), 2, DType::F32).unwrap();
    let fake = ae.decoder.forward(&ae.encoder.forward(&x).unwrap().mu).unwrap().detach();
    let mut opt = Adam::new(
        ae.discriminator_vars(),
        AdamParams {
            lr: 2e-3,
            ..Default::default()
        },
    )
    .unwrap();
    for _ in 0..150 {
        let obj = discriminator_objective(&ae.discriminator.forward(&x).unwrap(), &ae.discriminator.forward(&fake).unwrap()).unwrap();
        opt.backward_step(&obj.neg().unwrap()).unwrap();
    }
    let prob = |t: &Tensor| {
        sigmoid(&ae.discriminator.forward(t).unwrap())
            .unwrap()
            .mean_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap()
    };
    let (real, recon) = (prob(&x), prob(&fake));
    assert!(real > 0.9 && recon < 0.1, "D(x) = {real}, D(x~) = {recon}");
}

#[test]
fn stage2_loss_decreases() {
    let cfg = DiffusionConfig {
        base_channels: 8,
        norm_groups: 4,
        learning_rate: 2e-3,
        batch_size: 32,
        epochs: 6,
        ..Default::default()
    };
    // Four fixed patterns: far more predictable than white noise.
    let patterns = stream(5, "training/patterns", 0)
        .standard_normal(&(4, 4, 2, 2).into(), DType::F64, &Device::Cpu)
        .unwrap();
    let idx: Vec<u32> = (0..512).map(|i| i % 4).collect();
    let src = LatentSource::Fixed(patterns.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu).unwrap(), 0).unwrap());
    let mut t = Stage2Trainer::new(&cfg, (4, 2, 2), 5, DType::F32, None).unwrap();
    t.run(&src).unwrap();
    let h = t.history();
    assert!(h.last().unwrap().loss < 0.7 * h[0].loss, "{h:?}");
}
