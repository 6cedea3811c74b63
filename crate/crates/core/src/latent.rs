//! Image batches and latent tensors, the endpoints and the payload of the
//! transmission chain.
//!
//! Both are stored channel-first (`N×C×H×W`) as candle tensors.

use std::fmt;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// A batch of RGB images with values in [−1, 1], shape `N×3×H×W`.
#[derive(Debug, Clone)]
pub struct ImageBatch {
    data: Tensor,
}

impl ImageBatch {
    pub fn new(data: Tensor) -> Result<Self> {
        let (_, c, _, _) = data
            .dims4()
            .map_err(|_| Error::Shape(format!("image batch must be 4-d, got {:?}", data.dims())))?;
        if c != 3 {
            return Err(Error::Shape(format!("image batch needs 3 channels, got {c}")));
        }
        let lo = data.min_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let hi = data.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if lo < -1.0 || hi > 1.0 || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Domain(format!(
                "image values must lie in [-1, 1], got [{lo}, {hi}]"
            )));
        }
        Ok(Self { data })
    }

    /// Wraps a tensor produced by a saturating decoder without re-checking the
    /// range.
    pub(crate) fn from_decoder(data: Tensor) -> Self {
        Self { data }
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[3]
    }

    /// Image `i` mapped to the 8-bit scale (rounded, clamped), channel-first.
    pub fn to_8bit(&self, i: usize) -> Result<Vec<f64>> {
        let v: Vec<f64> = self
            .data
            .get(i)?
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1()?;
        Ok(v.into_iter()
            .map(|x| ((x + 1.0) * 127.5).round().clamp(0.0, 255.0))
            .collect())
    }
}

/// Where a latent currently sits in the transmission chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Clean,
    Normalized,
    Received,
    Denoising(usize),
    Denoised,
}

impl Stage {
    fn rank(self) -> u8 {
        match self {
            Stage::Clean => 0,
            Stage::Normalized => 1,
            Stage::Received => 2,
            Stage::Denoising(_) => 3,
            Stage::Denoised => 4,
        }
    }

    /// True when `next` may follow `self` within one transmission.
    pub fn precedes(self, next: Stage) -> bool {
        match (self, next) {
            (Stage::Denoising(a), Stage::Denoising(b)) => b < a,
            _ => next.rank() > self.rank(),
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Stage::Clean => write!(f, "clean"),
            Stage::Normalized => write!(f, "normalized"),
            Stage::Received => write!(f, "received"),
            Stage::Denoising(t) => write!(f, "denoising({t})"),
            Stage::Denoised => write!(f, "denoised"),
        }
    }
}

/// Batch of semantic latents `N×c×h×w`, held in f64 so that channel-side
/// power bookkeeping is exact to well below 1e-9.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    data: Tensor,
    stage: Stage,
}

impl LatentTensor {
    pub fn new(data: Tensor, stage: Stage) -> Result<Self> {
        if data.rank() < 2 {
            return Err(Error::Shape(format!(
                "latent needs a batch dimension, got {:?}",
                data.dims()
            )));
        }
        Ok(Self {
            data: data.to_dtype(DType::F64)?,
            stage,
        })
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn with_stage(self, stage: Stage) -> Self {
        Self { stage, ..self }
    }

    pub fn with_data(&self, data: Tensor, stage: Stage) -> Result<Self> {
        if data.dims() != self.data.dims() {
            return Err(Error::Shape(format!(
                "latent shape changed from {:?} to {:?}",
                self.data.dims(),
                data.dims()
            )));
        }
        Self::new(data, stage)
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    /// Elements per item, the `k` of the power constraint.
    pub fn item_len(&self) -> usize {
        self.data.elem_count() / self.batch().max(1)
    }

    pub fn dims(&self) -> &[usize] {
        self.data.dims()
    }

    /// Per-item rows as `N×k`.
    pub fn rows(&self) -> Result<Tensor> {
        Ok(self.data.reshape((self.batch(), self.item_len()))?)
    }

    /// Mean squared element value of each item.
    pub fn item_power(&self) -> Result<Vec<f64>> {
        Ok(self.rows()?.sqr()?.mean(1)?.to_vec1()?)
    }

    /// Euclidean norm of each item.
    pub fn item_norm(&self) -> Result<Vec<f64>> {
        Ok(self.rows()?.sqr()?.sum(1)?.sqrt()?.to_vec1()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn image_range_is_enforced() {
        let dev = Device::Cpu;
        let ok = Tensor::zeros((1, 3, 4, 4), DType::F32, &dev).unwrap();
        assert!(ImageBatch::new(ok).is_ok());
        let bad = Tensor::full(1.5f32, (1, 3, 4, 4), &dev).unwrap();
        assert!(ImageBatch::new(bad).is_err());
        let gray = Tensor::zeros((1, 1, 4, 4), DType::F32, &dev).unwrap();
        assert!(ImageBatch::new(gray).is_err());
    }

    #[test]
    fn eight_bit_mapping() {
        let dev = Device::Cpu;
        let t = Tensor::new(&[-1f32, 0.0, 1.0], &dev)
            .unwrap()
            .reshape((1, 3, 1, 1))
            .unwrap();
        let b = ImageBatch::new(t).unwrap();
        assert_eq!(b.to_8bit(0).unwrap(), vec![0.0, 128.0, 255.0]);
    }

    #[test]
    fn stage_order() {
        use Stage::*;
        assert!(Clean.precedes(Normalized));
        assert!(Received.precedes(Denoising(5)));
        assert!(Denoising(5).precedes(Denoising(4)));
        assert!(!Denoising(4).precedes(Denoising(4)));
        assert!(Denoising(1).precedes(Denoised));
        assert!(Received.precedes(Denoised));
        assert!(!Denoised.precedes(Clean));
    }
}
