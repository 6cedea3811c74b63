//! Both training stages driven from a [`Config`] and an ingested dataset.

use candle_core::{DType, Device, Tensor};

use super::{Config, Dataset, Split};
use crate::autoencoder::{Autoencoder, Stage1Data, Stage1Trainer};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{LatentSource, Stage2Trainer};
use crate::rng::child_seed;
use crate::{Error, Result};

/// Training split of `data`, with every `val_every`-th image held out for
/// validation.
pub fn stage1_data(cfg: &Config, data: &Dataset) -> Result<Stage1Data> {
    let (_, images) = data.split(Split::Train)?;
    let n = images.dim(0)?;
    if n == 0 {
        return Err(Error::Dataset("the training split is empty".into()));
    }
    let every = cfg.train.val_every;
    if every < 2 || n < every {
        return Ok(Stage1Data { train: images, val: None });
    }
    let (val, train): (Vec<u32>, Vec<u32>) = (0..n as u32).partition(|i| *i as usize % every == every - 1);
    let pick = |idx: &[u32]| -> Result<Tensor> { Ok(images.index_select(&Tensor::new(idx, &Device::Cpu)?, 0)?) };
    Ok(Stage1Data {
        train: pick(&train)?,
        val: Some(pick(&val)?),
    })
}

fn snapshot(cfg: &Config) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "config": cfg, "config_hash": cfg.hash() }))
}

/// Starts stage 1 from scratch, or resumes from `resume`.
pub fn stage1_trainer(cfg: &Config, resume: Option<&Checkpoint>) -> Result<Stage1Trainer> {
    match resume {
        Some(c) => Stage1Trainer::from_checkpoint(c, DType::F32),
        None => Stage1Trainer::new(&cfg.model, &cfg.train.options(), cfg.train.seed, DType::F32),
    }
}

/// Trains (or finishes training) the autoencoder. The checkpoint records the
/// configuration snapshot under `extra.run`.
pub fn train_autoencoder(cfg: &Config, data: &Dataset, resume: Option<&Checkpoint>) -> Result<Checkpoint> {
    cfg.validate()?;
    let d = stage1_data(cfg, data)?;
    let mut trainer = stage1_trainer(cfg, resume)?;
    trainer.run(&d)?;
    let mut ckpt = trainer.checkpoint(Some(&d))?;
    ckpt.extra["run"] = snapshot(cfg)?;
    Ok(ckpt)
}

/// Latents of the training split under the autoencoder `ae`.
pub fn stage2_source(cfg: &Config, ae: &Checkpoint, data: &Dataset) -> Result<LatentSource> {
    let model = Autoencoder::from_checkpoint(ae, DType::F32)?;
    let (_, images) = data.split(Split::Train)?;
    if images.dim(0)? == 0 {
        return Err(Error::Dataset("the training split is empty".into()));
    }
    LatentSource::encoded(&model, &images, cfg.diffusion.latent_mode, cfg.channel.power)
}

/// Trains (or finishes training) the denoiser on latents of `ae`; the result
/// is linked to `ae` by hash.
pub fn train_denoiser(
    cfg: &Config,
    ae: &Checkpoint,
    data: &Dataset,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let source = stage2_source(cfg, ae, data)?;
    let parent = ae.hash()?;
    let mut trainer = match resume {
        Some(c) => {
            if c.parent.as_deref() != Some(parent.as_str()) {
                return Err(Error::CheckpointMismatch {
                    expected: parent,
                    found: c.parent.clone().unwrap_or_default(),
                });
            }
            Stage2Trainer::from_checkpoint(c, DType::F32)?
        }
        None => Stage2Trainer::new(
            &cfg.diffusion,
            source.latent_shape()?,
            child_seed(cfg.train.seed, "stage2"),
            DType::F32,
            Some(parent),
        )?,
    };
    trainer.run(&source)?;
    let mut ckpt = trainer.checkpoint()?;
    ckpt.extra["run"] = snapshot(cfg)?;
    Ok(ckpt)
}
