//! Minimal binary tensor container for debug dumps of pipeline latents.
//!
//! Layout: 8-byte magic, 1-byte dtype tag, little-endian `u32` rank, one
//! `u64` per dimension, then the little-endian payload in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::checkpoint::write_atomic;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"DNSCTENS";
const TAG_F32: u8 = 1;
const TAG_F64: u8 = 2;

pub fn encode(t: &Tensor) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + 8 * t.elem_count());
    out.extend_from_slice(MAGIC);
    let flat = t.flatten_all()?;
    let tag = match t.dtype() {
        DType::F32 => TAG_F32,
        DType::F64 => TAG_F64,
        other => return Err(Error::Shape(format!("unsupported dump dtype {other:?}"))),
    };
    out.push(tag);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    if tag == TAG_F32 {
        for v in flat.to_vec1::<f32>()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    } else {
        for v in flat.to_vec1::<f64>()? {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(mut bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Checkpoint(format!("tensor dump: {m}"));
    let mut magic = [0u8; 8];
    bytes.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("bad magic"));
    }
    let mut tag = [0u8; 1];
    bytes.read_exact(&mut tag).map_err(|_| bad("truncated header"))?;
    let mut rank = [0u8; 4];
    bytes.read_exact(&mut rank).map_err(|_| bad("truncated header"))?;
    let rank = u32::from_le_bytes(rank) as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        bytes.read_exact(&mut d).map_err(|_| bad("truncated shape"))?;
        dims.push(u64::from_le_bytes(d) as usize);
    }
    let n: usize = dims.iter().product();
    let width = match tag[0] {
        TAG_F32 => 4,
        TAG_F64 => 8,
        t => return Err(bad(&format!("unknown dtype tag {t}"))),
    };
    if bytes.len() != n * width {
        return Err(bad(&format!("payload holds {} bytes, shape needs {}", bytes.len(), n * width)));
    }
    let dev = Device::Cpu;
    let t = if width == 4 {
        let v: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        Tensor::from_vec(v, dims, &dev)?
    } else {
        let v: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Tensor::from_vec(v, dims, &dev)?
    };
    Ok(t)
}

pub fn write(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_atomic(path.as_ref(), &encode(t)?)
}

pub fn read(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(Error::at(path))?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes).map_err(Error::at(path))?;
    decode(&bytes)
}

/// Appends `t` to an open writer in the container format.
pub fn write_to(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&encode(t)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_dtypes() {
        let dev = Device::Cpu;
        let a = Tensor::new(&[[1.5f64, -2.0, 1e-300], [0.0, 3.25, f64::MAX]], &dev).unwrap();
        let b = decode(&encode(&a).unwrap()).unwrap();
        assert_eq!(a.to_vec2::<f64>().unwrap(), b.to_vec2::<f64>().unwrap());
        let c = Tensor::new(&[0.5f32, 0.25], &dev).unwrap();
        let d = decode(&encode(&c).unwrap()).unwrap();
        assert_eq!(d.dtype(), DType::F32);
        assert_eq!(c.to_vec1::<f32>().unwrap(), d.to_vec1::<f32>().unwrap());
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::new(&[1.0f64, 2.0], &Device::Cpu).unwrap();
        let mut bytes = encode(&t).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'X';
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.bin");
        let t = Tensor::new(&[[[7.0f64]]], &Device::Cpu).unwrap();
        write(&p, &t).unwrap();
        assert_eq!(read(&p).unwrap().dims(), &[1, 1, 1]);
    }
}
