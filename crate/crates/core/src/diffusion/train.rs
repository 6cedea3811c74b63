use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{diffusion_loss, DenoiserModel, DiffusionConfig, LatentMode};
use crate::autoencoder::Autoencoder;
use crate::channel::power_normalize;
use crate::checkpoint::{Checkpoint, CheckpointKind, OptimizerSnapshot};
use crate::latent::{ImageBatch, LatentTensor, Stage};
use crate::optim::{cosine_lr, Adam, AdamParams};
use crate::rng::{stream, GaussianSource, RngState, Stream};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// Where stage-2 training latents `z0` come from.
#[derive(Debug, Clone)]
pub enum LatentSource {
    /// Fresh `N(0, I)` latents of shape `(c, h, w)` every epoch.
    Gaussian { shape: (usize, usize, usize), count: usize },
    /// A fixed latent set, `N×c×h×w`.
    Fixed(Tensor),
    /// Frozen-encoder posteriors of a training set; latents are redrawn every
    /// epoch and power-normalized to `power`.
    Encoded {
        mu: Tensor,
        sigma: Tensor,
        mode: LatentMode,
        power: f64,
    },
}

impl LatentSource {
    /// Encodes `images` once with the frozen encoder, keeping `μ` and `σ`.
    pub fn encoded(ae: &Autoencoder, images: &Tensor, mode: LatentMode, power: f64) -> Result<Self> {
        let n = images.dim(0)?;
        if n == 0 {
            return Err(Error::Dataset("no images to encode".into()));
        }
        let bs = ae.cfg.batch_size.max(1);
        let (mut mus, mut sigmas) = (Vec::new(), Vec::new());
        let mut start = 0;
        while start < n {
            let len = bs.min(n - start);
            let x = ImageBatch::new(images.narrow(0, start, len)?)?;
            let p = ae.encode(&x)?;
            mus.push(p.mu.detach().to_dtype(DType::F64)?);
            sigmas.push(p.sigma()?.detach().to_dtype(DType::F64)?);
            start += len;
        }
        Ok(Self::Encoded {
            mu: Tensor::cat(&mus, 0)?,
            sigma: Tensor::cat(&sigmas, 0)?,
            mode,
            power,
        })
    }

    pub fn len(&self) -> Result<usize> {
        Ok(match self {
            Self::Gaussian { count, .. } => *count,
            Self::Fixed(t) => t.dim(0)?,
            Self::Encoded { mu, .. } => mu.dim(0)?,
        })
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(self.len()? == 0)
    }

    pub fn latent_shape(&self) -> Result<(usize, usize, usize)> {
        Ok(match self {
            Self::Gaussian { shape, .. } => *shape,
            Self::Fixed(t) | Self::Encoded { mu: t, .. } => {
                let (_, c, h, w) = t.dims4()?;
                (c, h, w)
            }
        })
    }

    /// The latent set used in epoch `epoch`, in f64.
    pub fn epoch_latents(&self, seed: u64, epoch: usize) -> Result<Tensor> {
        let mut rng = stream(seed, "stage2/latents", epoch as u64);
        match self {
            Self::Gaussian { shape, count } => {
                let (c, h, w) = *shape;
                rng.standard_normal(&(*count, c, h, w).into(), DType::F64, &Device::Cpu)
            }
            Self::Fixed(t) => Ok(t.to_dtype(DType::F64)?),
            Self::Encoded { mu, sigma, mode, power } => {
                let z = match mode {
                    LatentMode::Mean => mu.clone(),
                    LatentMode::Sample => {
                        let eps = rng.standard_normal(mu.shape(), DType::F64, mu.device())?;
                        (mu + (sigma * eps)?)?
                    }
                };
                let z = power_normalize(&LatentTensor::new(z, Stage::Clean)?, *power)?;
                Ok(z.tensor().clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Epoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoopState {
    global_step: usize,
    seed: u64,
}

pub struct Stage2Trainer {
    pub model: DenoiserModel,
    schedule: NoiseSchedule,
    opt: Adam,
    noise: Stream,
    epoch: usize,
    state: LoopState,
    history: Vec<Stage2Epoch>,
    steps: Vec<f64>,
    parent: Option<String>,
    /// Weight average keyed like the store; empty when `ema_decay` is 0.
    ema: BTreeMap<String, Tensor>,
}

/// Optimizer-snapshot prefix for the live weights when the checkpoint
/// parameters hold the average.
const LIVE: &str = "live/";

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl Stage2Trainer {
    /// `parent` is the hash of the stage-1 checkpoint the latents came from.
    pub fn new(
        cfg: &DiffusionConfig,
        latent: (usize, usize, usize),
        seed: u64,
        dtype: DType,
        parent: Option<String>,
    ) -> Result<Self> {
        let model = DenoiserModel::new(cfg, latent, crate::rng::child_seed(seed, "stage2/init"), dtype)?;
        let opt = Adam::new(
            model.store().vars(),
            AdamParams {
                lr: cfg.learning_rate,
                ..Default::default()
            },
        )?;
        let ema = if cfg.ema_decay > 0.0 {
            model.store().tensors()?
        } else {
            BTreeMap::new()
        };
        Ok(Self {
            schedule: cfg.schedule()?,
            model,
            opt,
            noise: stream(seed, "stage2/noise", 0),
            epoch: 0,
            state: LoopState { global_step: 0, seed },
            history: Vec::new(),
            steps: Vec::new(),
            parent,
            ema,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let model = DenoiserModel::from_checkpoint(ckpt, dtype)?;
        let state: LoopState = serde_json::from_value(
            ckpt.extra
                .get("loop")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing stage-2 loop state".into()))?,
        )?;
        let snap = ckpt
            .optimizers
            .get("denoiser")
            .ok_or_else(|| Error::Checkpoint("missing optimizer denoiser".into()))?;
        let mut ema = BTreeMap::new();
        if model.cfg.ema_decay > 0.0 {
            ema = model.store().tensors()?;
            for (name, var) in model.store().vars() {
                let live = snap
                    .tensors
                    .get(&format!("{LIVE}{name}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing live weights for {name}")))?;
                var.set(&live.to_dtype(var.dtype())?)?;
            }
        }
        let mut opt = Adam::new(model.store().vars(), snap.state.params)?;
        opt.restore(&snap.state, &snap.tensors)?;
        let noise = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("missing RNG state".into()))?
            .restore()?;
        Ok(Self {
            schedule: ckpt.schedule()?,
            model,
            opt,
            noise,
            epoch: ckpt.epoch,
            state,
            history: serde_json::from_value(ckpt.curves.clone())?,
            steps: Vec::new(),
            parent: ckpt.parent.clone(),
            ema,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[Stage2Epoch] {
        &self.history
    }

    /// Per-step losses recorded since construction or restore.
    pub fn step_log(&self) -> &[f64] {
        &self.steps
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.model.cfg.epochs
    }

    pub fn train_epoch(&mut self, source: &LatentSource) -> Result<Stage2Epoch> {
        let n = source.len()?;
        if n == 0 {
            return Err(Error::Dataset("empty latent source".into()));
        }
        if source.latent_shape()? != self.model.latent_shape() {
            return Err(Error::Shape(format!(
                "latent source {:?} does not match the denoiser {:?}",
                source.latent_shape()?,
                self.model.latent_shape()
            )));
        }
        let cfg = self.model.cfg.clone();
        let total = cfg.epochs * n.div_ceil(cfg.batch_size);
        let z0_all = source.epoch_latents(self.state.seed, self.epoch)?;
        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut stream(self.state.seed, "stage2/shuffle", self.epoch as u64));

        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let ids = Tensor::new(chunk, &Device::Cpu)?;
            let z0 = z0_all.index_select(&ids, 0)?;
            let step = self.state.global_step;
            self.opt.set_lr(cosine_lr(cfg.learning_rate, cfg.lr_floor, step, total));
            let loss = diffusion_loss(&self.model, &z0, &self.schedule, &mut self.noise)?;
            let v = scalar(&loss)?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: "stage-2 noise-prediction loss".into(),
                });
            }
            self.opt.backward_step(&loss)?;
            self.update_ema(step)?;
            self.steps.push(v);
            sum += v;
            batches += 1;
            self.state.global_step += 1;
        }
        let stats = Stage2Epoch {
            epoch: self.epoch,
            loss: sum / batches as f64,
            lr: self.opt.lr(),
        };
        self.history.push(stats);
        self.epoch += 1;
        Ok(stats)
    }

    /// Decay ramps as `(1+n)/(10+n)` up to `ema_decay` so early averages do
    /// not stay anchored to the initialization.
    fn update_ema(&mut self, step: usize) -> Result<()> {
        if self.ema.is_empty() {
            return Ok(());
        }
        let n = step as f64;
        let d = self.model.cfg.ema_decay.min((1.0 + n) / (10.0 + n));
        for (name, var) in self.model.store().vars() {
            let avg = self
                .ema
                .get_mut(&name)
                .ok_or_else(|| Error::Checkpoint(format!("no average for {name}")))?;
            *avg = (avg.affine(d, 0.0)? + var.as_tensor().detach().affine(1.0 - d, 0.0)?)?;
        }
        Ok(())
    }

    /// The weights used for inference: the average if enabled, else the live ones.
    pub fn inference_params(&self) -> Result<BTreeMap<String, Tensor>> {
        if self.ema.is_empty() {
            self.model.store().tensors()
        } else {
            Ok(self.ema.clone())
        }
    }

    pub fn run(&mut self, source: &LatentSource) -> Result<()> {
        while !self.finished() {
            let s = self.train_epoch(source)?;
            info!(
                "stage 2 epoch {}/{}: loss {:.5} lr {:.2e}",
                s.epoch + 1,
                self.model.cfg.epochs,
                s.loss,
                s.lr
            );
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(
            CheckpointKind::Denoiser,
            serde_json::json!({ "diffusion": self.model.cfg }),
        );
        ckpt.betas = self.schedule.betas().to_vec();
        ckpt.params = self.inference_params()?;
        let mut tensors = self.opt.state_tensors();
        if !self.ema.is_empty() {
            for (name, t) in self.model.store().tensors()? {
                tensors.insert(format!("{LIVE}{name}"), t);
            }
        }
        ckpt.optimizers.insert(
            "denoiser".into(),
            OptimizerSnapshot {
                state: self.opt.state(),
                tensors,
            },
        );
        ckpt.epoch = self.epoch;
        ckpt.rng = Some(RngState::capture(&self.noise));
        ckpt.curves = serde_json::to_value(&self.history)?;
        ckpt.parent = self.parent.clone();
        ckpt.extra = serde_json::json!({
            "diffusion": self.model.cfg,
            "latent_shape": self.model.latent_shape(),
            "loop": self.state,
        });
        Ok(ckpt)
    }
}

/// Trains a denoiser from scratch on `source`. `parent` links the result to
/// the stage-1 checkpoint whose encoder produced the latents.
pub fn train_stage2(
    source: &LatentSource,
    cfg: &DiffusionConfig,
    seed: u64,
    parent: Option<String>,
) -> Result<Checkpoint> {
    let mut trainer = Stage2Trainer::new(cfg, source.latent_shape()?, seed, DType::F32, parent)?;
    trainer.run(source)?;
    trainer.checkpoint()
}
