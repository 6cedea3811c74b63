use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use log::warn;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::latent::ImageBatch;
use crate::{Error, Result};

/// Pixel mapping applied at ingestion.
pub const NORMALIZATION: &str = "x / 127.5 - 1 (8-bit to [-1, 1])";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestItem {
    /// File name relative to the source directory.
    pub id: String,
    /// SHA-256 of the file bytes.
    pub hash: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_dir: PathBuf,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub normalization: String,
    /// SHA-256 over the sorted `(id, hash)` list.
    pub content_hash: String,
    pub test_fraction: f64,
    pub items: Vec<ManifestItem>,
    pub warnings: Vec<String>,
}

/// Ingested images, `N×3×H×W` in [−1, 1], in manifest order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    images: Tensor,
}

/// Test membership from the first 8 bytes of the content hash.
pub fn is_test(hash: &[u8], test_fraction: f64) -> bool {
    let mut b = [0u8; 8];
    b.copy_from_slice(&hash[..8]);
    let u = u64::from_be_bytes(b) as f64 / 2f64.powi(64);
    u < test_fraction
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Center-crops to a square and resizes to `width × height` RGB.
fn prepare(img: image::DynamicImage, height: usize, width: usize) -> image::RgbImage {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let sq = img.crop_imm((w - side) / 2, (h - side) / 2, side, side).to_rgb8();
    if sq.width() as usize == width && sq.height() as usize == height {
        sq
    } else {
        image::imageops::resize(&sq, width as u32, height as u32, FilterType::Triangle)
    }
}

/// Decodes every PNG/JPEG in `dir`, skipping undecodable files with a
/// warning, and splits train/test by content hash.
pub fn ingest_dataset(dir: impl AsRef<Path>, target: (usize, usize), test_fraction: f64) -> Result<Dataset> {
    let dir = dir.as_ref();
    let (height, width) = target;
    if height == 0 || width == 0 {
        return Err(Error::Dataset("target size must be positive".into()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(Error::at(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Dataset(format!("{} holds no PNG or JPEG files", dir.display())));
    }

    let mut items = Vec::new();
    let mut warnings = Vec::new();
    let mut pixels: Vec<f32> = Vec::new();
    for path in &files {
        let id = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let bytes = std::fs::read(path).map_err(Error::at(path))?;
        let img = match image::load_from_memory(&bytes) {
            Ok(img) => img,
            Err(e) => {
                let msg = format!("skipping {id}: {e}");
                warn!("{msg}");
                warnings.push(msg);
                continue;
            }
        };
        let rgb = prepare(img, height, width);
        let plane = height * width;
        let mut chw = vec![0f32; 3 * plane];
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                chw[c * plane + i] = px.0[c] as f32 / 127.5 - 1.0;
            }
        }
        pixels.extend(chw);
        let digest = Sha256::digest(&bytes);
        let split = if is_test(&digest, test_fraction) {
            Split::Test
        } else {
            Split::Train
        };
        items.push(ManifestItem {
            id,
            hash: hex::encode(digest),
            split,
        });
    }
    if items.is_empty() {
        return Err(Error::Dataset(format!(
            "none of the {} files in {} could be decoded",
            files.len(),
            dir.display()
        )));
    }
    let mut h = Sha256::new();
    for it in &items {
        h.update(it.id.as_bytes());
        h.update([0]);
        h.update(it.hash.as_bytes());
        h.update([0]);
    }
    let n = items.len();
    let images = Tensor::from_vec(pixels, (n, 3, height, width), &Device::Cpu)?;
    Ok(Dataset {
        manifest: DatasetManifest {
            source_dir: dir.to_path_buf(),
            count: n,
            height,
            width,
            normalization: NORMALIZATION.into(),
            content_hash: hex::encode(h.finalize()),
            test_fraction,
            items,
            warnings,
        },
        images,
    })
}

impl Dataset {
    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    /// Ids and images of one split, in manifest order.
    pub fn split(&self, which: Split) -> Result<(Vec<String>, Tensor)> {
        let (ids, idx): (Vec<String>, Vec<u32>) = self
            .manifest
            .items
            .iter()
            .enumerate()
            .filter(|(_, it)| it.split == which)
            .map(|(i, it)| (it.id.clone(), i as u32))
            .unzip();
        let t = if idx.is_empty() {
            Tensor::zeros((0, 3, self.manifest.height, self.manifest.width), candle_core::DType::F32, &Device::Cpu)?
        } else {
            self.images.index_select(&Tensor::new(idx.as_slice(), &Device::Cpu)?, 0)?
        };
        Ok((ids, t))
    }

    pub fn batch(&self, which: Split) -> Result<(Vec<String>, ImageBatch)> {
        let (ids, t) = self.split(which)?;
        Ok((ids, ImageBatch::new(t)?))
    }
}
