use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, GroupNorm, Init, Linear, VarBuilder};

use super::DiffusionConfig;
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::nn::{conv2d, group_norm, timestep_embedding, Downsample, NonLocal, ParamStore, ResBlock, Upsample};
use crate::{Error, Result};

/// Anything that predicts the injected noise `ε̂(z_t, t)` for a batch.
pub trait NoisePredictor {
    /// Working dtype of [`forward_eps`](Self::forward_eps).
    fn dtype(&self) -> DType;

    /// Differentiable prediction; `z_t` is in [`dtype`](Self::dtype).
    fn forward_eps(&self, z_t: &Tensor, t: &[usize]) -> Result<Tensor>;

    /// Prediction for an f64 batch, returned in f64.
    fn predict_eps(&self, z_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let out = self.forward_eps(&z_t.to_dtype(self.dtype())?, t)?;
        Ok(out.to_dtype(DType::F64)?)
    }
}

/// Time-conditioned U-Net noise predictor.
///
/// Besides the usual encoder/decoder path the output carries a per-channel
/// gate `g(t) ⊙ z_t`, a learned linear skip from the input, and scales the
/// decoder head by a second gate `a(t)`: `ε̂ = a(t) ⊙ head + g(t) ⊙ z_t`. The
/// head normalizes activations, so `g` is what lets the network represent
/// predictions proportional to the input magnitude. `a` starts at one.
#[derive(Clone)]
pub struct DenoiserModel {
    pub cfg: DiffusionConfig,
    latent: (usize, usize, usize),
    store: ParamStore,
    dtype: DType,
    device: Device,
    time_in: Linear,
    time_out: Linear,
    skip_gate: Linear,
    out_gate: Linear,
    conv_in: Conv2d,
    down: Vec<(ResBlock, Option<Downsample>)>,
    mid: (ResBlock, Option<NonLocal>, ResBlock),
    up: Vec<(ResBlock, Option<Upsample>)>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl DenoiserModel {
    /// `latent` is the `(c, h, w)` shape the model denoises.
    pub fn new(cfg: &DiffusionConfig, latent: (usize, usize, usize), seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        Self::build(cfg, latent, ParamStore::new(seed), dtype)
    }

    fn build(cfg: &DiffusionConfig, latent: (usize, usize, usize), store: ParamStore, dtype: DType) -> Result<Self> {
        let (c, h, w) = latent;
        let levels = cfg.channel_mult.len();
        let f = 1usize << (levels - 1);
        if c == 0 || h % f != 0 || w % f != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "latent {c}×{h}×{w} does not support {levels} resolution levels"
            )));
        }
        let device = Device::Cpu;
        let vb = store.var_builder(dtype, &device);
        let base = cfg.base_channels;
        let g = cfg.norm_groups;
        let tdim = 4 * base;
        let time_in = candle_nn::linear(base, tdim, vb.pp("time.lin1"))?;
        let time_out = candle_nn::linear(tdim, tdim, vb.pp("time.lin2"))?;
        let skip_gate = candle_nn::linear(tdim, c, vb.pp("skip_gate"))?;
        let out_gate = unit_gate(tdim, c, vb.pp("out_gate"))?;
        let conv_in = conv2d(c, base, 3, 1, 1, vb.pp("conv_in"))?;

        let mut down = Vec::with_capacity(levels);
        let mut skips = Vec::with_capacity(levels);
        let mut ch = base;
        for (i, &mult) in cfg.channel_mult.iter().enumerate() {
            let out = base * mult;
            let vb = vb.pp(format!("down{i}"));
            let res = ResBlock::new(ch, out, g, Some(tdim), vb.pp("res"))?;
            ch = out;
            skips.push(ch);
            let ds = if i + 1 < levels {
                Some(Downsample::new(ch, ch, vb.pp("down"))?)
            } else {
                None
            };
            down.push((res, ds));
        }
        let mid = (
            ResBlock::new(ch, ch, g, Some(tdim), vb.pp("mid.res1"))?,
            if cfg.attention {
                Some(NonLocal::new(ch, g, vb.pp("mid.attn"))?)
            } else {
                None
            },
            ResBlock::new(ch, ch, g, Some(tdim), vb.pp("mid.res2"))?,
        );
        let mut up = Vec::with_capacity(levels);
        for (i, &mult) in cfg.channel_mult.iter().enumerate().rev() {
            let out = base * mult;
            let vb = vb.pp(format!("up{i}"));
            let res = ResBlock::new(ch + skips[i], out, g, Some(tdim), vb.pp("res"))?;
            ch = out;
            let us = if i > 0 {
                Some(Upsample::new(ch, ch, vb.pp("up"))?)
            } else {
                None
            };
            up.push((res, us));
        }
        Ok(Self {
            cfg: cfg.clone(),
            latent,
            dtype,
            device,
            time_in,
            time_out,
            skip_gate,
            out_gate,
            conv_in,
            down,
            mid,
            up,
            norm_out: group_norm(g, ch, vb.pp("norm_out"))?,
            conv_out: conv2d(ch, c, 3, 1, 1, vb.pp("conv_out"))?,
            store,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, dtype: DType) -> Result<Self> {
        if ckpt.kind != CheckpointKind::Denoiser {
            return Err(Error::Checkpoint(format!(
                "expected a denoiser checkpoint, found {:?}",
                ckpt.kind
            )));
        }
        let field = |k: &str| {
            ckpt.extra
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("denoiser checkpoint lacks {k}")))
        };
        let cfg: DiffusionConfig = serde_json::from_value(field("diffusion")?)?;
        let latent: (usize, usize, usize) = serde_json::from_value(field("latent_shape")?)?;
        let saved = ckpt.params.len();
        let model = Self::build(&cfg, latent, ParamStore::from_tensors(ckpt.params.clone())?, dtype)?;
        if model.store.vars().len() != saved {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {saved} tensors but the configured denoiser has {}",
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

    pub fn latent_shape(&self) -> (usize, usize, usize) {
        self.latent
    }

    /// Differentiable forward pass in the model dtype.
    pub fn forward(&self, z_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        let (n, c, h, w) = z_t.dims4()?;
        if (c, h, w) != self.latent || n != t.len() {
            return Err(Error::Shape(format!(
                "denoiser expects N×{:?} with one timestep per item, got {:?} and {} steps",
                self.latent,
                z_t.dims(),
                t.len()
            )));
        }
        let steps = self.cfg.steps;
        if let Some(&bad) = t.iter().find(|&&s| s == 0 || s > steps) {
            return Err(Error::StepOutOfRange { t: bad, max: steps });
        }
        let emb = timestep_embedding(t, self.cfg.base_channels, self.dtype, &self.device)?;
        let temb = self.time_out.forward(&self.time_in.forward(&emb)?.silu()?)?;

        let mut hs = Vec::with_capacity(self.down.len());
        let mut x = self.conv_in.forward(z_t)?;
        for (res, ds) in &self.down {
            x = res.forward(&x, Some(&temb))?;
            hs.push(x.clone());
            if let Some(ds) = ds {
                x = ds.forward(&x)?;
            }
        }
        x = self.mid.0.forward(&x, Some(&temb))?;
        if let Some(attn) = &self.mid.1 {
            x = attn.forward(&x)?;
        }
        x = self.mid.2.forward(&x, Some(&temb))?;
        for (res, us) in &self.up {
            let skip = hs.pop().expect("one skip per level");
            x = res.forward(&Tensor::cat(&[&x, &skip], 1)?, Some(&temb))?;
            if let Some(us) = us {
                x = us.forward(&x)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&x)?.silu()?)?;
        let act = temb.silu()?;
        let gate = self.skip_gate.forward(&act)?.unsqueeze(2)?.unsqueeze(3)?;
        let scale = self.out_gate.forward(&act)?.unsqueeze(2)?.unsqueeze(3)?;
        Ok((out.broadcast_mul(&scale)? + z_t.broadcast_mul(&gate)?)?)
    }
}

/// A linear map that outputs exactly one at initialization.
fn unit_gate(in_dim: usize, out_dim: usize, vb: VarBuilder) -> Result<Linear> {
    let w = vb.get_with_hints((out_dim, in_dim), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(out_dim, "bias", Init::Const(1.0))?;
    Ok(Linear::new(w, Some(b)))
}

impl NoisePredictor for DenoiserModel {
    fn dtype(&self) -> DType {
        self.dtype
    }

    fn forward_eps(&self, z_t: &Tensor, t: &[usize]) -> Result<Tensor> {
        self.forward(z_t, t)
    }
}
