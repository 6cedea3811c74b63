//! End-to-end transmission: encode, power-normalize, AWGN, receiver
//! normalization, reverse diffusion and decoding, plus the no-denoiser path.

use std::time::Instant;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::autoencoder::Autoencoder;
use crate::channel::{awgn_transmit, power_normalize, receiver_normalize, ChannelConfig};
use crate::checkpoint::Checkpoint;
use crate::diffusion::{denoise, DenoiserModel, LatentMode, SigmaChoice};
use crate::latent::{ImageBatch, LatentTensor, Stage};
use crate::metrics::evaluate;
use crate::rng::{stream, PerItem};
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

/// How the receiver undoes the transmitter's power normalization before
/// decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleRecovery {
    /// Per-image factor `‖z‖ / √(kP)` sent as side information.
    #[default]
    SideInfo,
    /// One factor for every image, the training-set mean latent RMS over `√P`.
    TrainingMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    pub latent_mode: LatentMode,
    pub scale_recovery: ScaleRecovery,
    pub sigma: SigmaChoice,
    /// Keep every intermediate latent in the records.
    pub keep_latents: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            latent_mode: LatentMode::Sample,
            scale_recovery: ScaleRecovery::SideInfo,
            sigma: SigmaChoice::Posterior,
            keep_latents: false,
        }
    }
}

/// Outcome of sending one image.
#[derive(Debug, Clone)]
pub struct TransmissionRecord {
    pub image_id: String,
    pub snr_db: f64,
    /// Number of reverse steps applied (0 on the no-denoiser path).
    pub t_start: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
    /// Per-image share of the batch wall time.
    pub ms: f64,
    /// Decoded image, `3×H×W` in [−1, 1].
    pub reconstruction: Tensor,
    /// Mean square of the latent right after power normalization.
    pub normalized_power: f64,
    /// Stages visited, in order.
    pub stages: Vec<Stage>,
    pub latents: Vec<(Stage, Tensor)>,
}

/// CSV row of a [`TransmissionRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordRow {
    pub image_id: String,
    pub snr_db: f64,
    pub t_start: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub ms: f64,
}

impl TransmissionRecord {
    pub fn row(&self) -> RecordRow {
        RecordRow {
            image_id: self.image_id.clone(),
            snr_db: self.snr_db,
            t_start: self.t_start,
            psnr: self.psnr,
            ssim: self.ssim,
            ms: self.ms,
        }
    }
}

pub fn write_records_csv(w: impl std::io::Write, records: &[TransmissionRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r.row())?;
    }
    out.flush()?;
    Ok(())
}

/// Independent noise streams for one image, derived from the master seed and
/// the image id so results do not depend on batching or SNR.
fn item_streams(seed: u64, ids: &[String], purpose: &str) -> PerItem {
    PerItem::new(
        ids.iter()
            .map(|id| stream(seed, &format!("transmit/{purpose}/{id}"), 0))
            .collect(),
    )
}

/// Which path a batch takes through the receiver.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Route {
    Full { steps_override: Option<usize> },
    Ablation,
}

/// Loaded models ready for repeated transmissions.
#[derive(Clone)]
pub struct Transceiver {
    ae: Autoencoder,
    dn: Option<DenoiserModel>,
    schedule: Option<NoiseSchedule>,
    latent_rms: Option<f64>,
    pub opts: PipelineOptions,
}

impl Transceiver {
    /// Full transceiver; refuses a denoiser trained on another autoencoder.
    pub fn new(ae: &Checkpoint, dn: &Checkpoint, opts: PipelineOptions) -> Result<Self> {
        let ae_hash = ae.hash()?;
        match &dn.parent {
            Some(p) if *p == ae_hash => {}
            other => {
                return Err(Error::CheckpointMismatch {
                    expected: ae_hash,
                    found: other.clone().unwrap_or_else(|| "<none>".into()),
                })
            }
        }
        let mut t = Self::ablation_only(ae, opts)?;
        let model = DenoiserModel::from_checkpoint(dn, DType::F32)?;
        let (c, h, w) = model.latent_shape();
        let (_, ec, eh, ew) = t.ae.latent_shape(1)?;
        if (c, h, w) != (ec, eh, ew) {
            return Err(Error::Shape(format!(
                "denoiser latent {:?} differs from encoder latent {:?}",
                (c, h, w),
                (ec, eh, ew)
            )));
        }
        t.schedule = Some(dn.schedule()?);
        t.dn = Some(model);
        Ok(t)
    }

    /// Encoder and decoder only, for the no-denoiser path.
    pub fn ablation_only(ae: &Checkpoint, opts: PipelineOptions) -> Result<Self> {
        Ok(Self {
            ae: Autoencoder::from_checkpoint(ae, DType::F32)?,
            dn: None,
            schedule: None,
            latent_rms: ae.extra.get("latent_rms").and_then(|v| v.as_f64()),
            opts,
        })
    }

    pub fn autoencoder(&self) -> &Autoencoder {
        &self.ae
    }

    pub fn schedule(&self) -> Option<&NoiseSchedule> {
        self.schedule.as_ref()
    }

    /// Sends every image of `x` through the full chain. `steps_override`
    /// replaces the SNR-matched step count; `Some(0)` skips both receiver
    /// normalization and de-noising. `hook` sees each reverse step.
    pub fn transmit(
        &self,
        x: &ImageBatch,
        ids: &[String],
        channel: &ChannelConfig,
        steps_override: Option<usize>,
        seed: u64,
        hook: &mut dyn FnMut(usize, &LatentTensor),
    ) -> Result<Vec<TransmissionRecord>> {
        self.run(x, ids, channel, Route::Full { steps_override }, seed, hook)
    }

    /// The same chain with the de-noising loop removed.
    pub fn transmit_ablation(
        &self,
        x: &ImageBatch,
        ids: &[String],
        channel: &ChannelConfig,
        seed: u64,
    ) -> Result<Vec<TransmissionRecord>> {
        self.run(x, ids, channel, Route::Ablation, seed, &mut |_, _| {})
    }

    /// Clean latent of each image, drawn exactly as [`transmit`](Self::transmit) does.
    pub fn source_latent(&self, x: &ImageBatch, ids: &[String], seed: u64) -> Result<LatentTensor> {
        let p = self.ae.encode(x)?;
        match self.opts.latent_mode {
            LatentMode::Sample => p.sample_latent(&mut item_streams(seed, ids, "sample")),
            LatentMode::Mean => LatentTensor::new(p.mu.clone(), Stage::Clean),
        }
    }

    fn run(
        &self,
        x: &ImageBatch,
        ids: &[String],
        channel: &ChannelConfig,
        route: Route,
        seed: u64,
        hook: &mut dyn FnMut(usize, &LatentTensor),
    ) -> Result<Vec<TransmissionRecord>> {
        channel.validate()?;
        if ids.len() != x.len() {
            return Err(Error::Shape(format!("{} ids for {} images", ids.len(), x.len())));
        }
        let started = Instant::now();
        let keep = self.opts.keep_latents;
        let mut stages = Vec::new();
        let mut latents = Vec::new();
        let visit = |z: &LatentTensor, stages: &mut Vec<Stage>, latents: &mut Vec<(Stage, Tensor)>| {
            stages.push(z.stage());
            if keep {
                latents.push((z.stage(), z.tensor().clone()));
            }
        };

        let z = self.source_latent(x, ids, seed)?;
        visit(&z, &mut stages, &mut latents);
        let norms = z.item_norm()?;
        let z_nor = power_normalize(&z, channel.power)?;
        let powers = z_nor.item_power()?;
        visit(&z_nor, &mut stages, &mut latents);
        let z_rx = awgn_transmit(&z_nor, channel, &mut item_streams(seed, ids, "channel"))?;
        visit(&z_rx, &mut stages, &mut latents);

        let (z0, t_start) = match route {
            Route::Ablation => (z_rx, 0),
            Route::Full { steps_override } => {
                let (dn, schedule) = match (&self.dn, &self.schedule) {
                    (Some(d), Some(s)) => (d, s),
                    _ => return Err(Error::Checkpoint("no denoiser loaded".into())),
                };
                if let Some(k) = steps_override {
                    if k > schedule.steps() {
                        return Err(Error::StepOutOfRange {
                            t: k,
                            max: schedule.steps(),
                        });
                    }
                }
                let (scaled, t_star) = receiver_normalize(&z_rx, channel, schedule)?;
                let steps = steps_override.unwrap_or(t_star);
                if steps == 0 {
                    (z_rx, 0)
                } else {
                    let start = scaled.with_stage(Stage::Denoising(steps));
                    visit(&start, &mut stages, &mut latents);
                    let mut noise = item_streams(seed, ids, "reverse");
                    let out = denoise(dn, &start, steps, schedule, self.opts.sigma, &mut noise, &mut |t, z| {
                        visit(z, &mut stages, &mut latents);
                        hook(t, z);
                    })?;
                    (out, steps)
                }
            }
        };

        let k = z0.item_len() as f64;
        let factors: Vec<f64> = match self.opts.scale_recovery {
            ScaleRecovery::SideInfo => norms.iter().map(|n| n / (k * channel.power).sqrt()).collect(),
            ScaleRecovery::TrainingMean => {
                let rms = self.latent_rms.ok_or_else(|| {
                    Error::Checkpoint("autoencoder checkpoint lacks latent_rms statistics".into())
                })?;
                vec![rms / channel.power.sqrt(); z0.batch()]
            }
        };
        let f = Tensor::from_vec(factors, (z0.batch(), 1), z0.tensor().device())?;
        let rescaled = z0.rows()?.broadcast_mul(&f)?.reshape(z0.dims())?;
        let z_hat = z0.with_data(rescaled, z0.stage())?;
        let x_hat = self.ae.decode(&z_hat)?;
        let metrics = evaluate(x, &x_hat)?;
        let ms = started.elapsed().as_secs_f64() * 1e3 / x.len().max(1) as f64;

        let recon = x_hat.tensor();
        metrics
            .into_iter()
            .enumerate()
            .map(|(i, m)| {
                Ok(TransmissionRecord {
                    image_id: ids[i].clone(),
                    snr_db: channel.snr_db,
                    t_start,
                    psnr: m.psnr,
                    ssim: m.ssim,
                    mse: m.mse,
                    ms,
                    reconstruction: recon.get(i)?,
                    normalized_power: powers[i],
                    stages: stages.clone(),
                    latents: latents
                        .iter()
                        .map(|(s, t)| Ok((*s, t.get(i)?)))
                        .collect::<Result<Vec<_>>>()?,
                })
            })
            .collect()
    }
}

/// One-shot [`Transceiver::transmit`] from checkpoints.
pub fn transmit(
    ae: &Checkpoint,
    dn: &Checkpoint,
    x: &ImageBatch,
    ids: &[String],
    channel: &ChannelConfig,
    steps_override: Option<usize>,
    seed: u64,
) -> Result<Vec<TransmissionRecord>> {
    Transceiver::new(ae, dn, PipelineOptions::default())?.transmit(x, ids, channel, steps_override, seed, &mut |_, _| {})
}

/// One-shot [`Transceiver::transmit_ablation`] from a stage-1 checkpoint.
pub fn transmit_ablation(
    ae: &Checkpoint,
    x: &ImageBatch,
    ids: &[String],
    channel: &ChannelConfig,
    seed: u64,
) -> Result<Vec<TransmissionRecord>> {
    Transceiver::ablation_only(ae, PipelineOptions::default())?.transmit_ablation(x, ids, channel, seed)
}

/// True when `stages` only ever moves forward.
pub fn stages_monotone(stages: &[Stage]) -> bool {
    stages.windows(2).all(|w| w[0].precedes(w[1]))
}
