use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, GroupNorm, VarBuilder};

use super::AutoencoderConfig;
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::latent::{ImageBatch, LatentTensor, Stage};
use crate::nn::{conv2d, group_norm, leaky_relu, Downsample, NonLocal, ParamStore, ResBlock, Upsample};
use crate::rng::GaussianSource;
use crate::{Error, Result};

/// Posterior parameters `N(mu, sigma²)` of the latent, per element.
#[derive(Debug, Clone)]
pub struct LatentParams {
    pub mu: Tensor,
    logvar: Tensor,
}

impl LatentParams {
    pub(crate) fn from_logvar(mu: Tensor, logvar: Tensor) -> Result<Self> {
        if mu.dims() != logvar.dims() {
            return Err(Error::Shape(format!(
                "mu {:?} and log-variance {:?} differ",
                mu.dims(),
                logvar.dims()
            )));
        }
        Ok(Self { mu, logvar })
    }

    /// Builds parameters from an explicit standard deviation, which must be
    /// strictly positive everywhere.
    pub fn from_mu_sigma(mu: Tensor, sigma: &Tensor) -> Result<Self> {
        if mu.dims() != sigma.dims() {
            return Err(Error::Shape(format!(
                "mu {:?} and sigma {:?} differ",
                mu.dims(),
                sigma.dims()
            )));
        }
        let min = sigma.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !(min > 0.0) {
            return Err(Error::Domain(format!("sigma must be positive, minimum is {min}")));
        }
        let logvar = (sigma.log()? * 2.0)?;
        Ok(Self { mu, logvar })
    }

    pub fn logvar(&self) -> &Tensor {
        &self.logvar
    }

    pub fn sigma(&self) -> Result<Tensor> {
        Ok((&self.logvar * 0.5)?.exp()?)
    }

    /// Reparameterized draw `mu + sigma ⊙ ε`, differentiable in both.
    pub fn sample(&self, noise: &mut impl GaussianSource) -> Result<Tensor> {
        let eps = noise.standard_normal(self.mu.shape(), self.mu.dtype(), self.mu.device())?;
        Ok((&self.mu + (self.sigma()? * eps)?)?)
    }

    /// [`sample`](Self::sample) packaged as a clean latent for transmission.
    pub fn sample_latent(&self, noise: &mut impl GaussianSource) -> Result<LatentTensor> {
        LatentTensor::new(self.sample(noise)?, Stage::Clean)
    }

    pub fn detach(&self) -> Self {
        Self {
            mu: self.mu.detach(),
            logvar: self.logvar.detach(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv2d,
    stages: Vec<(ResBlock, Downsample)>,
    mid: (ResBlock, NonLocal, ResBlock),
    norm_out: GroupNorm,
    conv_out: Conv2d,
    latent_channels: usize,
}

impl Encoder {
    pub fn new(cfg: &AutoencoderConfig, vb: VarBuilder) -> Result<Self> {
        let g = cfg.norm_groups;
        let conv_in = conv2d(3, cfg.base_channels, 3, 1, 1, vb.pp("conv_in"))?;
        let mut stages = Vec::with_capacity(cfg.downsample_stages);
        for i in 0..cfg.downsample_stages {
            let ch = if i == 0 { cfg.base_channels } else { cfg.mid_channels };
            let vb = vb.pp(format!("down{i}"));
            stages.push((
                ResBlock::new(ch, ch, g, None, vb.pp("res"))?,
                Downsample::new(ch, cfg.mid_channels, vb.pp("down"))?,
            ));
        }
        let c = cfg.mid_channels;
        let mid = (
            ResBlock::new(c, c, g, None, vb.pp("mid.res1"))?,
            NonLocal::new(c, g, vb.pp("mid.attn"))?,
            ResBlock::new(c, c, g, None, vb.pp("mid.res2"))?,
        );
        Ok(Self {
            conv_in,
            stages,
            mid,
            norm_out: group_norm(g, c, vb.pp("norm_out"))?,
            conv_out: conv2d(c, 2 * cfg.latent_channels, 3, 1, 1, vb.pp("conv_out"))?,
            latent_channels: cfg.latent_channels,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<LatentParams> {
        let mut h = self.conv_in.forward(x)?;
        for (res, down) in &self.stages {
            h = down.forward(&res.forward(&h, None)?)?;
        }
        h = self.mid.0.forward(&h, None)?;
        h = self.mid.1.forward(&h)?;
        h = self.mid.2.forward(&h, None)?;
        let h = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        let c = self.latent_channels;
        let mu = h.narrow(1, 0, c)?;
        let logvar = h.narrow(1, c, c)?.clamp(-30.0, 20.0)?;
        LatentParams::from_logvar(mu, logvar)
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    conv_in: Conv2d,
    mid: (ResBlock, NonLocal, ResBlock),
    stages: Vec<(ResBlock, Upsample)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    pub fn new(cfg: &AutoencoderConfig, vb: VarBuilder) -> Result<Self> {
        let g = cfg.norm_groups;
        let c = cfg.mid_channels;
        let conv_in = conv2d(cfg.latent_channels, c, 3, 1, 1, vb.pp("conv_in"))?;
        let mid = (
            ResBlock::new(c, c, g, None, vb.pp("mid.res1"))?,
            NonLocal::new(c, g, vb.pp("mid.attn"))?,
            ResBlock::new(c, c, g, None, vb.pp("mid.res2"))?,
        );
        let m = cfg.downsample_stages;
        let mut stages = Vec::with_capacity(m);
        for i in 0..m {
            let out = if i + 1 == m { cfg.base_channels } else { c };
            let vb = vb.pp(format!("up{i}"));
            stages.push((
                ResBlock::new(c, c, g, None, vb.pp("res"))?,
                Upsample::new(c, out, vb.pp("up"))?,
            ));
        }
        Ok(Self {
            conv_in,
            mid,
            stages,
            norm_out: group_norm(g, cfg.base_channels, vb.pp("norm_out"))?,
            conv_out: conv2d(cfg.base_channels, 3, 3, 1, 1, vb.pp("conv_out"))?,
        })
    }

    /// Image in [−1, 1] (tanh output).
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        h = self.mid.0.forward(&h, None)?;
        h = self.mid.1.forward(&h)?;
        h = self.mid.2.forward(&h, None)?;
        for (res, up) in &self.stages {
            h = up.forward(&res.forward(&h, None)?)?;
        }
        let h = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok(h.tanh()?)
    }
}

/// Patch discriminator: two stride-2 4×4 convolutions and a 3×3 head giving
/// one real/fake logit per receptive-field patch.
#[derive(Debug, Clone)]
pub struct Discriminator {
    conv1: Conv2d,
    conv2: Conv2d,
    norm2: GroupNorm,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(cfg: &AutoencoderConfig, vb: VarBuilder) -> Result<Self> {
        let d = cfg.disc_channels;
        Ok(Self {
            conv1: conv2d(3, d, 4, 2, 1, vb.pp("conv1"))?,
            conv2: conv2d(d, 2 * d, 4, 2, 1, vb.pp("conv2"))?,
            norm2: group_norm(cfg.norm_groups, 2 * d, vb.pp("norm2"))?,
            head: conv2d(2 * d, 1, 3, 1, 1, vb.pp("head"))?,
        })
    }

    /// Patch logits `N×1×H/4×W/4`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = leaky_relu(&self.conv1.forward(x)?, 0.2)?;
        let h = leaky_relu(&self.norm2.forward(&self.conv2.forward(&h)?)?, 0.2)?;
        Ok(self.head.forward(&h)?)
    }
}

/// Encoder, decoder and discriminator sharing one parameter store
/// (`encoder.*`, `decoder.*`, `disc.*`).
#[derive(Clone)]
pub struct Autoencoder {
    pub cfg: AutoencoderConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub discriminator: Discriminator,
    store: ParamStore,
    dtype: DType,
    device: Device,
}

impl Autoencoder {
    pub fn new(cfg: &AutoencoderConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        Self::build(cfg, ParamStore::new(seed), dtype)
    }

    fn build(cfg: &AutoencoderConfig, store: ParamStore, dtype: DType) -> Result<Self> {
        let device = Device::Cpu;
        let vb = store.var_builder(dtype, &device);
        Ok(Self {
            cfg: cfg.clone(),
            encoder: Encoder::new(cfg, vb.pp("encoder"))?,
            decoder: Decoder::new(cfg, vb.pp("decoder"))?,
            discriminator: Discriminator::new(cfg, vb.pp("disc"))?,
            store,
            dtype,
            device,
        })
    }

    /// Restores the model from a stage-1 checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Autoencoder {
            return Err(Error::Checkpoint(format!(
                "expected an autoencoder checkpoint, found {:?}",
                ckpt.kind
            )));
        }
        let cfg: AutoencoderConfig = serde_json::from_value(
            ckpt.config
                .get("model")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("config snapshot lacks [model]".into()))?,
        )?;
        let saved = ckpt.params.len();
        let store = ParamStore::from_tensors(ckpt.params.clone())?;
        let model = Self::build(&cfg, store, dtype)?;
        if model.store.vars().len() != saved {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {saved} tensors but the configured model has {}",
                model.store.vars().len()
            )));
        }
        Ok(model)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn generator_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.store
            .vars()
            .into_iter()
            .filter(|(k, _)| !k.starts_with("disc."))
            .collect()
    }

    pub fn discriminator_vars(&self) -> Vec<(String, candle_core::Var)> {
        self.store
            .vars()
            .into_iter()
            .filter(|(k, _)| k.starts_with("disc."))
            .collect()
    }

    fn check_images(&self, x: &ImageBatch) -> Result<()> {
        self.cfg.latent_dims(x.height(), x.width())?;
        Ok(())
    }

    /// Expected latent shape for an `n`-image batch at the configured size.
    pub fn latent_shape(&self, n: usize) -> Result<(usize, usize, usize, usize)> {
        let (c, h, w) = self.cfg.latent_dims(self.cfg.image_size, self.cfg.image_size)?;
        Ok((n, c, h, w))
    }

    pub fn encode(&self, x: &ImageBatch) -> Result<LatentParams> {
        self.check_images(x)?;
        self.encoder.forward(&x.tensor().to_dtype(self.dtype)?)
    }

    /// Decodes a latent batch; the latent must have the configured shape.
    pub fn decode(&self, z: &LatentTensor) -> Result<ImageBatch> {
        let expect = self.latent_shape(z.batch())?;
        if z.tensor().dims4().ok() != Some(expect) {
            return Err(Error::Shape(format!(
                "decoder expects latents of shape {expect:?}, got {:?}",
                z.dims()
            )));
        }
        let out = self.decoder.forward(&z.tensor().to_dtype(self.dtype)?)?;
        Ok(ImageBatch::from_decoder(out))
    }
}
