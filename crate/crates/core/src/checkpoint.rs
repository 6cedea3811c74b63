//! Versioned model checkpoint container.
//!
//! Layout: 8-byte magic `DNSCCKPT`, u32 format version, u64 header length,
//! a JSON header, then the raw little-endian payload of every tensor listed
//! in the header, in header order. The header carries the config snapshot,
//! epoch counter, RNG position, optimizer hyper-state, training curves and
//! (for de-noisers) the hash of the autoencoder checkpoint it was trained
//! against. The diffusion β table travels as the f64 tensor
//! `schedule/betas`, empty for autoencoder checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::optim::AdamState;
use crate::rng::RngState;
use crate::schedule::NoiseSchedule;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DNSCCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Autoencoder,
    Denoiser,
}

#[derive(Debug, Clone)]
pub struct OptimizerSnapshot {
    pub state: AdamState,
    pub tensors: BTreeMap<String, Tensor>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub betas: Vec<f64>,
    pub params: BTreeMap<String, Tensor>,
    pub optimizers: BTreeMap<String, OptimizerSnapshot>,
    pub epoch: usize,
    pub rng: Option<RngState>,
    pub curves: serde_json::Value,
    pub parent: Option<String>,
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    kind: CheckpointKind,
    config: serde_json::Value,
    epoch: usize,
    rng: Option<RngState>,
    optimizers: BTreeMap<String, AdamState>,
    curves: serde_json::Value,
    parent: Option<String>,
    extra: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn dtype_tag(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    }
}

fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F32 => {
            for x in flat.to_vec1::<f32>()? {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        DType::F64 => {
            for x in flat.to_vec1::<f64>()? {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        other => return Err(Error::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    }
    Ok(())
}

fn decode_tensor(entry: &TensorEntry, bytes: &[u8], pos: &mut usize) -> Result<Tensor> {
    let n: usize = entry.shape.iter().product();
    let width = match entry.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => return Err(Error::Checkpoint(format!("unknown dtype tag {other}"))),
    };
    let end = *pos + n * width;
    let chunk = bytes
        .get(*pos..end)
        .ok_or_else(|| Error::Checkpoint(format!("payload truncated in {}", entry.name)))?;
    *pos = end;
    let dev = Device::Cpu;
    let t = if width == 4 {
        let v: Vec<f32> = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect();
        Tensor::from_vec(v, entry.shape.as_slice(), &dev)?
    } else {
        let v: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::from_vec(v, entry.shape.as_slice(), &dev)?
    };
    Ok(t)
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, config: serde_json::Value) -> Self {
        Self {
            kind,
            config,
            betas: Vec::new(),
            params: BTreeMap::new(),
            optimizers: BTreeMap::new(),
            epoch: 0,
            rng: None,
            curves: serde_json::Value::Null,
            parent: None,
            extra: serde_json::Value::Null,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::from_betas(self.betas.clone())
    }

    fn all_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        if !self.betas.is_empty() {
            out.push((
                "schedule/betas".to_string(),
                Tensor::from_vec(self.betas.clone(), self.betas.len(), &Device::Cpu)?,
            ));
        }
        for (k, t) in &self.params {
            out.push((format!("param/{k}"), t.clone()));
        }
        for (opt, snap) in &self.optimizers {
            for (k, t) in &snap.tensors {
                out.push((format!("opt/{opt}/{k}"), t.clone()));
            }
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let tensors = self.all_tensors()?;
        let header = Header {
            format_version: FORMAT_VERSION,
            kind: self.kind,
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            optimizers: self
                .optimizers
                .iter()
                .map(|(k, v)| (k.clone(), v.state))
                .collect(),
            curves: self.curves.clone(),
            parent: self.parent.clone(),
            extra: self.extra.clone(),
            tensors: tensors
                .iter()
                .map(|(name, t)| {
                    Ok(TensorEntry {
                        name: name.clone(),
                        dtype: dtype_tag(t.dtype())?.to_string(),
                        shape: t.dims().to_vec(),
                    })
                })
                .collect::<Result<_>>()?,
        };
        let head = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for (_, t) in &tensors {
            encode_tensor(t, &mut out)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let head_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let head_end = 20 + head_len;
        let head = bytes
            .get(20..head_end)
            .ok_or_else(|| Error::Checkpoint("header truncated".into()))?;
        let header: Header = serde_json::from_slice(head)?;
        let mut pos = head_end;
        let mut ckpt = Checkpoint::new(header.kind, header.config);
        ckpt.epoch = header.epoch;
        ckpt.rng = header.rng;
        ckpt.curves = header.curves;
        ckpt.parent = header.parent;
        ckpt.extra = header.extra;
        for (name, state) in header.optimizers {
            ckpt.optimizers.insert(
                name,
                OptimizerSnapshot {
                    state,
                    tensors: BTreeMap::new(),
                },
            );
        }
        for entry in &header.tensors {
            let t = decode_tensor(entry, bytes, &mut pos)?;
            if entry.name == "schedule/betas" {
                ckpt.betas = t.to_vec1()?;
            } else if let Some(p) = entry.name.strip_prefix("param/") {
                ckpt.params.insert(p.to_string(), t);
            } else if let Some(rest) = entry.name.strip_prefix("opt/") {
                let (opt, key) = rest
                    .split_once('/')
                    .ok_or_else(|| Error::Checkpoint(format!("bad tensor name {}", entry.name)))?;
                ckpt.optimizers
                    .get_mut(opt)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor for unknown optimizer {opt}")))?
                    .tensors
                    .insert(key.to_string(), t);
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor {}", entry.name)));
            }
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                bytes.len() - pos
            )));
        }
        Ok(ckpt)
    }

    /// SHA-256 of the encoded checkpoint, hex.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }

    /// Writes atomically (temp file, then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(Error::at(path))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        fs::create_dir_all(dir).map_err(Error::at(dir))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} has no file name", path.display())))?
        .to_string_lossy()
        .into_owned();
    let tmp = path.with_file_name(format!(".{file_name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(Error::at(&tmp))?;
        f.write_all(bytes).map_err(Error::at(&tmp))?;
        f.sync_all().map_err(Error::at(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(Error::at(path))?;
    Ok(())
}
