use candle_core::{DType, Tensor};
use log::{debug, info};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{discriminator_objective, generator_adv_loss, kl_loss, recon_loss, Autoencoder, AutoencoderConfig};
use crate::checkpoint::{Checkpoint, CheckpointKind, OptimizerSnapshot};
use crate::optim::{cosine_lr, Adam, AdamParams};
use crate::rng::{stream, RngState, Stream};
use crate::{Error, Result};

/// Loop control for the first stage (`[train]` section).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub epochs: usize,
    /// Early stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Fraction of all steps during which the adversarial weight is zero.
    pub adv_warmup: f64,
    pub disc_learning_rate: f64,
    /// Final learning rate as a fraction of the initial one.
    pub lr_floor: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            patience: 5,
            adv_warmup: 0.3,
            disc_learning_rate: 2e-4,
            lr_floor: 0.1,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.patience == 0 {
            return Err(Error::Config("epochs and patience must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.adv_warmup) || !(0.0..=1.0).contains(&self.lr_floor) {
            return Err(Error::Config("adv_warmup and lr_floor must lie in [0, 1]".into()));
        }
        if !(self.disc_learning_rate > 0.0) {
            return Err(Error::Config("disc_learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Training images and an optional validation set, `N×3×H×W` in [−1, 1].
#[derive(Debug, Clone)]
pub struct Stage1Data {
    pub train: Tensor,
    pub val: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLosses {
    pub step: usize,
    pub recon: f64,
    pub reg: f64,
    pub adv_generator: f64,
    pub disc_objective: f64,
    pub total: f64,
    pub lambda_adv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub recon: f64,
    pub reg: f64,
    pub adv_generator: f64,
    pub disc_objective: f64,
    pub total: f64,
    pub val_recon: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LoopState {
    global_step: usize,
    best_val: Option<f64>,
    stale_epochs: usize,
    stopped_early: bool,
    options: TrainOptions,
    seed: u64,
    train_len: usize,
}

pub struct Stage1Trainer {
    pub model: Autoencoder,
    gen_opt: Adam,
    disc_opt: Adam,
    noise: Stream,
    epoch: usize,
    state: LoopState,
    history: Vec<EpochStats>,
    steps: Vec<StepLosses>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

impl Stage1Trainer {
    pub fn new(cfg: &AutoencoderConfig, opts: &TrainOptions, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        opts.validate()?;
        let model = Autoencoder::new(cfg, crate::rng::child_seed(seed, "stage1/init"), dtype)?;
        let gen_opt = Adam::new(
            model.generator_vars(),
            AdamParams {
                lr: cfg.learning_rate,
                ..Default::default()
            },
        )?;
        let disc_opt = Adam::new(
            model.discriminator_vars(),
            AdamParams {
                lr: opts.disc_learning_rate,
                beta1: 0.5,
                ..Default::default()
            },
        )?;
        Ok(Self {
            model,
            gen_opt,
            disc_opt,
            noise: stream(seed, "stage1/reparam", 0),
            epoch: 0,
            state: LoopState {
                global_step: 0,
                best_val: None,
                stale_epochs: 0,
                stopped_early: false,
                options: opts.clone(),
                seed,
                train_len: 0,
            },
            history: Vec::new(),
            steps: Vec::new(),
        })
    }

    /// Rebuilds the trainer, optimizer moments and noise stream included.
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        let model = Autoencoder::from_checkpoint(ckpt, dtype)?;
        let state: LoopState = serde_json::from_value(
            ckpt.extra
                .get("loop")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing stage-1 loop state".into()))?,
        )?;
        let opt = |name: &str| {
            ckpt.optimizers
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer {name}")))
        };
        let g = opt("generator")?;
        let mut gen_opt = Adam::new(model.generator_vars(), g.state.params)?;
        gen_opt.restore(&g.state, &g.tensors)?;
        let d = opt("discriminator")?;
        let mut disc_opt = Adam::new(model.discriminator_vars(), d.state.params)?;
        disc_opt.restore(&d.state, &d.tensors)?;
        let noise = ckpt
            .rng
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("missing RNG state".into()))?
            .restore()?;
        let history: Vec<EpochStats> = serde_json::from_value(ckpt.curves.clone())?;
        Ok(Self {
            model,
            gen_opt,
            disc_opt,
            noise,
            epoch: ckpt.epoch,
            state,
            history,
            steps: Vec::new(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    /// Per-step losses recorded since construction or restore.
    pub fn step_log(&self) -> &[StepLosses] {
        &self.steps
    }

    pub fn finished(&self) -> bool {
        self.state.stopped_early || self.epoch >= self.state.options.epochs
    }

    fn total_steps(&self, n: usize) -> usize {
        self.state.options.epochs * n.div_ceil(self.model.cfg.batch_size)
    }

    /// One pass over the shuffled training set followed by validation.
    pub fn train_epoch(&mut self, data: &Stage1Data) -> Result<EpochStats> {
        let n = data.train.dim(0)?;
        if n == 0 {
            return Err(Error::Dataset("empty training set".into()));
        }
        self.state.train_len = n;
        let cfg = self.model.cfg.clone();
        let opts = self.state.options.clone();
        let total_steps = self.total_steps(n);
        let warmup = (opts.adv_warmup * total_steps as f64).ceil() as usize;

        let mut order: Vec<u32> = (0..n as u32).collect();
        order.shuffle(&mut stream(self.state.seed, "stage1/shuffle", self.epoch as u64));

        let mut sums = [0.0f64; 5];
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let ids = Tensor::new(chunk, data.train.device())?;
            let x = data.train.index_select(&ids, 0)?.to_dtype(self.model.dtype())?;
            let step = self.state.global_step;
            let lambda_adv = if step < warmup { 0.0 } else { cfg.lambda_adv };
            let lr = cosine_lr(cfg.learning_rate, opts.lr_floor, step, total_steps);
            self.gen_opt.set_lr(lr);
            self.disc_opt
                .set_lr(cosine_lr(opts.disc_learning_rate, opts.lr_floor, step, total_steps));

            let p = self.model.encoder.forward(&x)?;
            let z = p.sample(&mut self.noise)?;
            let x_rec = self.model.decoder.forward(&z)?;
            let recon = recon_loss(&x, &x_rec)?;
            let reg = kl_loss(&p)?;
            let mut total = (&recon + (&reg * cfg.lambda_reg)?)?;
            let mut adv_g = 0.0;
            if lambda_adv > 0.0 {
                let g = generator_adv_loss(&self.model.discriminator.forward(&x_rec)?)?;
                adv_g = scalar(&g)?;
                total = (total + (g * lambda_adv)?)?;
            }
            let rec_v = scalar(&recon)?;
            let reg_v = scalar(&reg)?;
            let tot_v = scalar(&total)?;
            if !tot_v.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    what: format!("stage-1 generator loss (recon {rec_v}, reg {reg_v}, adv {adv_g})"),
                });
            }
            let grads = total.backward()?;
            self.gen_opt.apply(&grads)?;

            let mut disc_v = 0.0;
            if cfg.lambda_adv > 0.0 {
                let d_real = self.model.discriminator.forward(&x)?;
                let d_fake = self.model.discriminator.forward(&x_rec.detach())?;
                let obj = discriminator_objective(&d_real, &d_fake)?;
                disc_v = scalar(&obj)?;
                if !disc_v.is_finite() {
                    return Err(Error::NonFinite {
                        step,
                        what: "stage-1 discriminator objective".into(),
                    });
                }
                self.disc_opt.backward_step(&obj.neg()?)?;
            }

            self.steps.push(StepLosses {
                step,
                recon: rec_v,
                reg: reg_v,
                adv_generator: adv_g,
                disc_objective: disc_v,
                total: tot_v,
                lambda_adv,
            });
            for (s, v) in sums.iter_mut().zip([rec_v, reg_v, adv_g, disc_v, tot_v]) {
                *s += v;
            }
            batches += 1;
            self.state.global_step += 1;
        }

        let val_recon = match &data.val {
            Some(v) if v.dim(0)? > 0 => Some(self.evaluate_recon(v)?),
            _ => None,
        };
        let b = batches as f64;
        let stats = EpochStats {
            epoch: self.epoch,
            recon: sums[0] / b,
            reg: sums[1] / b,
            adv_generator: sums[2] / b,
            disc_objective: sums[3] / b,
            total: sums[4] / b,
            val_recon,
            lr: self.gen_opt.lr(),
        };
        if let Some(v) = val_recon {
            match self.state.best_val {
                Some(best) if v >= best => {
                    self.state.stale_epochs += 1;
                    if self.state.stale_epochs >= opts.patience {
                        self.state.stopped_early = true;
                        info!("stage 1: early stop after epoch {}", self.epoch);
                    }
                }
                _ => {
                    self.state.best_val = Some(v);
                    self.state.stale_epochs = 0;
                }
            }
        }
        debug!("stage 1 epoch {}: {:?}", self.epoch, stats);
        self.history.push(stats);
        self.epoch += 1;
        Ok(stats)
    }

    /// Mean-latent reconstruction MSE over `images`.
    pub fn evaluate_recon(&self, images: &Tensor) -> Result<f64> {
        let n = images.dim(0)?;
        let bs = self.model.cfg.batch_size.max(1);
        let mut sum = 0.0;
        let mut start = 0;
        while start < n {
            let len = bs.min(n - start);
            let x = images.narrow(0, start, len)?.to_dtype(self.model.dtype())?;
            let p = self.model.encoder.forward(&x)?;
            let rec = self.model.decoder.forward(&p.mu)?;
            sum += scalar(&recon_loss(&x, &rec)?)? * len as f64;
            start += len;
        }
        Ok(sum / n as f64)
    }

    /// Trains until the epoch budget is spent or early stopping triggers.
    pub fn run(&mut self, data: &Stage1Data) -> Result<()> {
        while !self.finished() {
            let s = self.train_epoch(data)?;
            info!(
                "stage 1 epoch {}/{}: recon {:.5} reg {:.4} adv {:.4} val {:?}",
                s.epoch + 1,
                self.state.options.epochs,
                s.recon,
                s.reg,
                s.adv_generator,
                s.val_recon
            );
        }
        Ok(())
    }

    /// Full trainer state, including the root-mean-square of sampled training
    /// latents under `extra.latent_rms` when `data` is given.
    pub fn checkpoint(&self, data: Option<&Stage1Data>) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(
            CheckpointKind::Autoencoder,
            serde_json::json!({ "model": self.model.cfg, "train": self.state.options }),
        );
        ckpt.params = self.model.store().tensors()?;
        ckpt.optimizers.insert(
            "generator".into(),
            OptimizerSnapshot {
                state: self.gen_opt.state(),
                tensors: self.gen_opt.state_tensors(),
            },
        );
        ckpt.optimizers.insert(
            "discriminator".into(),
            OptimizerSnapshot {
                state: self.disc_opt.state(),
                tensors: self.disc_opt.state_tensors(),
            },
        );
        ckpt.epoch = self.epoch;
        ckpt.rng = Some(RngState::capture(&self.noise));
        ckpt.curves = serde_json::to_value(&self.history)?;
        let mut extra = serde_json::json!({ "loop": self.state });
        if let Some(d) = data {
            extra["latent_rms"] = serde_json::json!(self.latent_rms(&d.train)?);
        }
        ckpt.extra = extra;
        Ok(ckpt)
    }

    /// Mean over images of `‖z‖ / √k` for sampled latents `z`.
    pub fn latent_rms(&self, images: &Tensor) -> Result<f64> {
        let n = images.dim(0)?;
        let bs = self.model.cfg.batch_size.max(1);
        let mut rng = stream(self.state.seed, "stage1/latent-stats", 0);
        let mut acc = 0.0;
        let mut start = 0;
        while start < n {
            let len = bs.min(n - start);
            let x = images.narrow(0, start, len)?.to_dtype(self.model.dtype())?;
            let z = self.model.encoder.forward(&x)?.sample_latent(&mut rng)?;
            let k = z.item_len() as f64;
            acc += z.item_norm()?.iter().map(|v| v / k.sqrt()).sum::<f64>();
            start += len;
        }
        Ok(acc / n as f64)
    }
}

/// Trains the first stage from scratch and returns its checkpoint.
pub fn train_stage1(
    data: &Stage1Data,
    cfg: &AutoencoderConfig,
    opts: &TrainOptions,
    seed: u64,
) -> Result<Checkpoint> {
    if data.train.dim(0)? == 0 {
        return Err(Error::Dataset("empty training set".into()));
    }
    let mut trainer = Stage1Trainer::new(cfg, opts, seed, DType::F32)?;
    trainer.run(data)?;
    trainer.checkpoint(Some(data))
}
