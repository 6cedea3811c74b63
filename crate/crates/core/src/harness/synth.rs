//! Procedural toy images: a two-colour gradient background with a few
//! flat-coloured shapes on top.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;

use crate::rng::stream;
use crate::{Error, Result};

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn to_px(c: [f64; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
}

/// Renders image `index` of the stream for `seed`.
pub fn render(size: usize, seed: u64, index: u64) -> RgbImage {
    let mut rng = stream(seed, "synth", index);
    let s = size as f64;
    let (c0, c1) = (color(&mut rng), color(&mut rng));
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let u = ((x as f64 / s - 0.5) * dx + (y as f64 / s - 0.5) * dy + 0.75) / 1.5;
        let mut c = [0.0; 3];
        for i in 0..3 {
            c[i] = c0[i] + (c1[i] - c0[i]) * u;
        }
        to_px(c)
    });
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let col = to_px(color(&mut rng));
        let cx = rng.random_range(0.15..0.85) * s;
        let cy = rng.random_range(0.15..0.85) * s;
        let r = rng.random_range(0.1..0.3) * s;
        let kind = rng.random_range(0..3u8);
        let period = rng.random_range(3..8u32);
        for y in 0..size as u32 {
            for x in 0..size as u32 {
                let (fx, fy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let inside = match kind {
                    0 => fx * fx + fy * fy <= r * r,
                    1 => fx.abs() <= r && fy.abs() <= 0.6 * r,
                    _ => fx.abs() <= r && fy.abs() <= r && (x / period) % 2 == 0,
                };
                if inside {
                    img.put_pixel(x, y, col);
                }
            }
        }
    }
    img
}

/// Writes `count` PNGs named `synth_00000.png`, … into `dir`.
pub fn generate(dir: impl AsRef<Path>, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(Error::at(dir))?;
    (0..count)
        .map(|i| {
            let path = dir.join(format!("synth_{i:05}.png"));
            render(size, seed, i as u64).save(&path)?;
            Ok(path)
        })
        .collect()
}
