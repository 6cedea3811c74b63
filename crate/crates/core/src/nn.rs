//! Parameter storage and the convolutional building blocks shared by the
//! autoencoder, the discriminator and the de-noising U-Net.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Shape, Tensor, Var, D};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Init, Linear, VarBuilder};
use rand::Rng;

use crate::rng::{normal_vec, stream};
use crate::{Error, Result};

/// Named trainable variables with deterministic, name-keyed initialization:
/// a parameter's initial value depends only on the store seed and its path,
/// not on construction order or a global RNG.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
}

struct StoreInner {
    seed: u64,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                seed,
                vars: BTreeMap::new(),
            })),
        }
    }

    /// A store pre-filled with saved values; model construction picks these
    /// up instead of initializing.
    pub fn from_tensors(tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        let store = Self::new(0);
        {
            let mut inner = store.inner.lock().expect("param store poisoned");
            for (name, t) in tensors {
                inner.vars.insert(name, Var::from_tensor(&t)?);
            }
        }
        Ok(store)
    }

    pub fn var_builder(&self, dtype: DType, device: &Device) -> VarBuilder<'static> {
        VarBuilder::from_backend(Box::new(self.clone()), dtype, device.clone())
    }

    /// All variables, sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    /// Detached copies of all variables; later in-place updates do not reach them.
    pub fn tensors(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars()
            .into_iter()
            .map(|(k, v)| Ok((k, v.as_tensor().detach().copy()?)))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }
}

fn init_values(init: &Init, shape: &Shape, rng: &mut impl Rng) -> Vec<f64> {
    let n = shape.elem_count();
    let uniform = |rng: &mut dyn rand::RngCore, lo: f64, up: f64| -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..up)).collect()
    };
    match *init {
        Init::Const(c) => vec![c; n],
        Init::Uniform { lo, up } => uniform(rng, lo, up),
        Init::Randn { mean, stdev } => normal_vec(rng, n)
            .into_iter()
            .map(|x| mean + stdev * x)
            .collect(),
        Init::Kaiming {
            dist,
            fan,
            non_linearity,
        } => {
            let fan = fan.for_shape(shape).max(1);
            let std = non_linearity.gain() / (fan as f64).sqrt();
            match dist {
                NormalOrUniform::Uniform => {
                    let bound = 3f64.sqrt() * std;
                    uniform(rng, -bound, bound)
                }
                NormalOrUniform::Normal => normal_vec(rng, n).into_iter().map(|x| std * x).collect(),
            }
        }
    }
}

impl SimpleBackend for ParamStore {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if let Some(v) = inner.vars.get(name) {
            if v.shape() != &s {
                candle_core::bail!(
                    "parameter {name} has shape {:?}, model expects {:?}",
                    v.shape(),
                    s
                );
            }
            return v.as_tensor().to_dtype(dtype);
        }
        let mut rng = stream(inner.seed, name, 0);
        let data = init_values(&h, &s, &mut rng);
        let t = Tensor::from_vec(data, &s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    fn get_unchecked(&self, name: &str, dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        let inner = self.inner.lock().expect("param store poisoned");
        match inner.vars.get(name) {
            Some(v) => v.as_tensor().to_dtype(dtype),
            None => candle_core::bail!("no parameter named {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.contains_key(name)
    }
}

pub fn conv2d(
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    vb: VarBuilder,
) -> Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding,
        stride,
        ..Default::default()
    };
    Ok(candle_nn::conv2d(in_ch, out_ch, kernel, cfg, vb)?)
}

/// Convolution whose weights and bias start at zero, so a residual branch
/// ending in it is the identity at initialization.
pub fn zero_conv2d(in_ch: usize, out_ch: usize, kernel: usize, padding: usize, vb: VarBuilder) -> Result<Conv2d> {
    let w = vb.get_with_hints((out_ch, in_ch, kernel, kernel), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(out_ch, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(
        w,
        Some(b),
        Conv2dConfig {
            padding,
            ..Default::default()
        },
    ))
}

pub fn group_norm(groups: usize, ch: usize, vb: VarBuilder) -> Result<GroupNorm> {
    if ch % groups != 0 {
        return Err(Error::Config(format!(
            "{ch} channels are not divisible into {groups} norm groups"
        )));
    }
    Ok(candle_nn::group_norm(groups, ch, 1e-6, vb)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Numerically stable `softplus(x) = log(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// GroupNorm → Swish → 3×3 conv residual block, optionally conditioned on a
/// time embedding that is projected and added between the two convolutions.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    time_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        groups: usize,
        time_dim: Option<usize>,
        vb: VarBuilder,
    ) -> Result<Self> {
        let norm1 = group_norm(groups, in_ch, vb.pp("norm1"))?;
        let conv1 = conv2d(in_ch, out_ch, 3, 1, 1, vb.pp("conv1"))?;
        let time_proj = match time_dim {
            Some(d) => Some(candle_nn::linear(d, out_ch, vb.pp("time_proj"))?),
            None => None,
        };
        let norm2 = group_norm(groups, out_ch, vb.pp("norm2"))?;
        let conv2 = zero_conv2d(out_ch, out_ch, 3, 1, vb.pp("conv2"))?;
        let shortcut = if in_ch != out_ch {
            Some(conv2d(in_ch, out_ch, 1, 1, 0, vb.pp("shortcut"))?)
        } else {
            None
        };
        Ok(Self {
            norm1,
            conv1,
            time_proj,
            norm2,
            conv2,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(temb)) = (&self.time_proj, temb) {
            let t = proj.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
            h = h.broadcast_add(&t)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Single-head spatial self-attention ("non-local") block.
#[derive(Debug, Clone)]
pub struct NonLocal {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl NonLocal {
    pub fn new(ch: usize, groups: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: group_norm(groups, ch, vb.pp("norm"))?,
            q: conv2d(ch, ch, 1, 1, 0, vb.pp("q"))?,
            k: conv2d(ch, ch, 1, 1, 0, vb.pp("k"))?,
            v: conv2d(ch, ch, 1, 1, 0, vb.pp("v"))?,
            proj: zero_conv2d(ch, ch, 1, 0, vb.pp("proj"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let hn = self.norm.forward(x)?;
        let q = self.q.forward(&hn)?.reshape((b, c, h * w))?;
        let k = self.k.forward(&hn)?.reshape((b, c, h * w))?;
        let v = self.v.forward(&hn)?.reshape((b, c, h * w))?;
        let scores = (q.transpose(1, 2)?.contiguous()?.matmul(&k)? / (c as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = v.matmul(&attn.transpose(1, 2)?.contiguous()?)?.reshape((b, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

/// Stride-2 3×3 convolution halving the spatial size.
#[derive(Debug, Clone)]
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(in_ch: usize, out_ch: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: conv2d(in_ch, out_ch, 3, 2, 1, vb.pp("conv"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.conv.forward(x)?)
    }
}

/// Nearest-neighbour ×2 upsampling followed by a 3×3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(in_ch: usize, out_ch: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: conv2d(in_ch, out_ch, 3, 1, 1, vb.pp("conv"))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?)
    }
}

/// Sinusoidal embedding of integer timesteps, `N×dim` (`dim` even).
pub fn timestep_embedding(t: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &step in t {
        let step = step as f64;
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step * freq).sin());
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((step * freq).cos());
        }
    }
    Ok(Tensor::from_vec(data, (t.len(), 2 * half), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_depends_only_on_seed_and_name() {
        let dev = Device::Cpu;
        let a = ParamStore::new(9);
        let b = ParamStore::new(9);
        // Different construction order.
        let _ = conv2d(3, 4, 3, 1, 1, a.var_builder(DType::F32, &dev).pp("x")).unwrap();
        let _ = conv2d(4, 4, 3, 1, 1, a.var_builder(DType::F32, &dev).pp("y")).unwrap();
        let _ = conv2d(4, 4, 3, 1, 1, b.var_builder(DType::F32, &dev).pp("y")).unwrap();
        let _ = conv2d(3, 4, 3, 1, 1, b.var_builder(DType::F32, &dev).pp("x")).unwrap();
        let ta = a.tensors().unwrap();
        let tb = b.tensors().unwrap();
        assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
        for (k, v) in &ta {
            let x: Vec<f32> = v.flatten_all().unwrap().to_vec1().unwrap();
            let y: Vec<f32> = tb[k].flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(x, y, "{k}");
        }
    }

    #[test]
    fn blocks_preserve_or_halve_shape() {
        let dev = Device::Cpu;
        let store = ParamStore::new(1);
        let vb = store.var_builder(DType::F32, &dev);
        let x = Tensor::ones((2, 8, 8, 8), DType::F32, &dev).unwrap();
        let rb = ResBlock::new(8, 16, 4, Some(12), vb.pp("rb")).unwrap();
        let temb = timestep_embedding(&[1, 7], 12, DType::F32, &dev).unwrap();
        assert_eq!(rb.forward(&x, Some(&temb)).unwrap().dims(), &[2, 16, 8, 8]);
        let nl = NonLocal::new(8, 4, vb.pp("nl")).unwrap();
        assert_eq!(nl.forward(&x).unwrap().dims(), &[2, 8, 8, 8]);
        let d = Downsample::new(8, 4, vb.pp("d")).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims(), &[2, 4, 4, 4]);
        let u = Upsample::new(8, 4, vb.pp("u")).unwrap();
        assert_eq!(u.forward(&x).unwrap().dims(), &[2, 4, 16, 16]);
    }

    #[test]
    fn softplus_matches_naive_in_safe_range() {
        let dev = Device::Cpu;
        let x = Tensor::new(&[-3.0f64, -0.5, 0.0, 0.7, 4.0], &dev).unwrap();
        let got: Vec<f64> = softplus(&x).unwrap().to_vec1().unwrap();
        for (g, v) in got.iter().zip([-3.0f64, -0.5, 0.0, 0.7, 4.0]) {
            assert!((g - (1.0 + v.exp()).ln()).abs() < 1e-12);
        }
        let big = Tensor::new(&[800.0f64, -800.0], &dev).unwrap();
        let got: Vec<f64> = softplus(&big).unwrap().to_vec1().unwrap();
        assert_eq!(got[0], 800.0);
        assert!(got[1] >= 0.0 && got[1] < 1e-300);
    }
}
