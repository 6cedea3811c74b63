use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use candle_core::Tensor;
use log::info;
use serde::{Deserialize, Serialize};

use super::stats::{mean, sample_std};
use super::{Config, Dataset, Split};
use crate::checkpoint::{write_atomic, Checkpoint};
use crate::latent::ImageBatch;
use crate::pipeline::Transceiver;
use crate::{Error, Result};

pub const FULL_SERIES: &str = "latent-diff";
pub const ABLATION_SERIES: &str = "no-denoiser";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    Snr,
    Steps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub axis: f64,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_ssim: f64,
    pub std_ssim: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub points: Vec<SweepPoint>,
}

/// Aggregated metrics over one sweep axis, possibly for several series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub kind: SweepKind,
    pub config_hash: String,
    pub seed: u64,
    /// Channel SNR of a step-count sweep.
    pub snr_db: Option<f64>,
    pub series: Vec<Series>,
}

impl SweepResult {
    pub fn series(&self, label: &str) -> Option<&Series> {
        self.series.iter().find(|s| s.label == label)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_atomic(path.as_ref(), text.as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Metrics of one image at one sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub psnr: f64,
    pub ssim: f64,
    pub t_start: usize,
}

/// Identity of a sweep point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointKey {
    pub ablation: bool,
    pub snr_db: f64,
    /// `None` uses the SNR-matched start step.
    pub steps: Option<usize>,
}

impl PointKey {
    fn label(&self) -> &'static str {
        if self.ablation {
            ABLATION_SERIES
        } else {
            FULL_SERIES
        }
    }

    fn file_name(&self) -> String {
        let steps = self.steps.map_or("auto".to_string(), |s| s.to_string());
        format!("{}_snr{}_steps{}.json", self.label(), self.snr_db, steps)
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct PointCache {
    samples: BTreeMap<String, Sample>,
}

/// Runs sweep points over the test split of a dataset.
pub struct Evaluator {
    cfg: Config,
    config_hash: String,
    seed: u64,
    tx: Transceiver,
    ids: Vec<String>,
    images: Tensor,
    cache_dir: Option<PathBuf>,
}

impl Evaluator {
    pub fn new(cfg: &Config, ae: &Checkpoint, dn: &Checkpoint, data: &Dataset) -> Result<Self> {
        let (mut ids, mut images) = data.split(Split::Test)?;
        if ids.is_empty() {
            return Err(Error::Dataset("the test split is empty".into()));
        }
        if cfg.eval.max_images > 0 && ids.len() > cfg.eval.max_images {
            ids.truncate(cfg.eval.max_images);
            images = images.narrow(0, 0, cfg.eval.max_images)?;
        }
        Ok(Self {
            config_hash: cfg.hash(),
            seed: cfg.channel_seed(),
            tx: Transceiver::new(ae, dn, cfg.pipeline())?,
            cfg: cfg.clone(),
            ids,
            images,
            cache_dir: None,
        })
    }

    /// Persists per-image results under `dir/<config hash>/` and reuses them.
    pub fn with_cache(mut self, dir: impl Into<PathBuf>) -> Self {
        self.cache_dir = Some(dir.into());
        self
    }

    pub fn transceiver(&self) -> &Transceiver {
        &self.tx
    }

    pub fn image_ids(&self) -> &[String] {
        &self.ids
    }

    fn cache_path(&self, key: &PointKey) -> Option<PathBuf> {
        self.cache_dir
            .as_ref()
            .map(|d| d.join(&self.config_hash).join(key.file_name()))
    }

    /// Per-image samples of one point, in test-split order.
    pub fn point(&self, key: PointKey) -> Result<Vec<(String, Sample)>> {
        let path = self.cache_path(&key);
        let mut cache = match &path {
            Some(p) if p.exists() => {
                let text = std::fs::read_to_string(p).map_err(Error::at(p))?;
                serde_json::from_str::<PointCache>(&text)?
            }
            _ => PointCache::default(),
        };
        let channel = self.cfg.channel.with_snr(key.snr_db);
        let bs = self.cfg.eval.batch_size;
        for start in (0..self.ids.len()).step_by(bs) {
            let end = (start + bs).min(self.ids.len());
            let todo: Vec<usize> = (start..end)
                .filter(|&i| !cache.samples.contains_key(&self.ids[i]))
                .collect();
            if todo.is_empty() {
                continue;
            }
            let idx: Vec<u32> = todo.iter().map(|&i| i as u32).collect();
            let x = ImageBatch::new(self.images.index_select(&Tensor::new(idx.as_slice(), self.images.device())?, 0)?)?;
            let ids: Vec<String> = todo.iter().map(|&i| self.ids[i].clone()).collect();
            let records = if key.ablation {
                self.tx.transmit_ablation(&x, &ids, &channel, self.seed)?
            } else {
                self.tx.transmit(&x, &ids, &channel, key.steps, self.seed, &mut |_, _| {})?
            };
            for r in records {
                cache.samples.insert(
                    r.image_id,
                    Sample {
                        psnr: r.psnr,
                        ssim: r.ssim,
                        t_start: r.t_start,
                    },
                );
            }
            if let Some(p) = &path {
                if let Some(dir) = p.parent() {
                    std::fs::create_dir_all(dir).map_err(Error::at(dir))?;
                }
                write_atomic(p, serde_json::to_string(&cache)?.as_bytes())?;
            }
        }
        self.ids
            .iter()
            .map(|id| {
                cache
                    .samples
                    .get(id)
                    .map(|s| (id.clone(), *s))
                    .ok_or_else(|| Error::Report(format!("missing sample for {id}")))
            })
            .collect()
    }

    /// Evaluates `keys` with up to `eval.workers` points in flight.
    pub fn points(&self, keys: &[PointKey]) -> Result<Vec<Vec<(String, Sample)>>> {
        let workers = self.cfg.eval.workers.clamp(1, keys.len().max(1));
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<Vec<(String, Sample)>>>>> =
            Mutex::new((0..keys.len()).map(|_| None).collect());
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= keys.len() {
                        break;
                    }
                    let r = self.point(keys[i]);
                    info!("sweep point {:?} done", keys[i]);
                    slots.lock().expect("sweep slots poisoned")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("sweep slots poisoned")
            .into_iter()
            .map(|r| r.expect("every point evaluated"))
            .collect()
    }

    fn aggregate(axis: f64, samples: &[(String, Sample)]) -> SweepPoint {
        let p: Vec<f64> = samples.iter().map(|(_, s)| s.psnr).collect();
        let q: Vec<f64> = samples.iter().map(|(_, s)| s.ssim).collect();
        SweepPoint {
            axis,
            mean_psnr: mean(&p),
            std_psnr: sample_std(&p),
            mean_ssim: mean(&q),
            std_ssim: sample_std(&q),
            n: samples.len(),
        }
    }

    fn collect(&self, kind: SweepKind, snr_db: Option<f64>, keys: &[PointKey], axes: &[f64]) -> Result<SweepResult> {
        let results = self.points(keys)?;
        let mut series: Vec<Series> = Vec::new();
        for ((key, axis), samples) in keys.iter().zip(axes).zip(&results) {
            let point = Self::aggregate(*axis, samples);
            match series.iter_mut().find(|s| s.label == key.label()) {
                Some(s) => s.points.push(point),
                None => series.push(Series {
                    label: key.label().to_string(),
                    points: vec![point],
                }),
            }
        }
        Ok(SweepResult {
            kind,
            config_hash: self.config_hash.clone(),
            seed: self.seed,
            snr_db,
            series,
        })
    }

    /// Full pipeline (and optionally the ablation) at every SNR.
    pub fn snr_sweep(&self, snr_list: &[f64], include_ablation: bool) -> Result<SweepResult> {
        if snr_list.is_empty() {
            return Err(Error::Config("empty SNR list".into()));
        }
        let mut keys = Vec::new();
        let mut axes = Vec::new();
        for ablation in [false, true] {
            if ablation && !include_ablation {
                continue;
            }
            for &snr_db in snr_list {
                keys.push(PointKey {
                    ablation,
                    snr_db,
                    steps: None,
                });
                axes.push(snr_db);
            }
        }
        self.collect(SweepKind::Snr, None, &keys, &axes)
    }

    /// Full pipeline at one SNR for each forced step count.
    pub fn steps_sweep(&self, snr_db: f64, counts: &[usize]) -> Result<SweepResult> {
        let max = self
            .tx
            .schedule()
            .map(|s| s.steps())
            .ok_or_else(|| Error::Checkpoint("no denoiser loaded".into()))?;
        if let Some(&bad) = counts.iter().find(|&&k| k > max) {
            return Err(Error::StepOutOfRange { t: bad, max });
        }
        if counts.is_empty() {
            return Err(Error::Config("empty step-count list".into()));
        }
        let keys: Vec<PointKey> = counts
            .iter()
            .map(|&k| PointKey {
                ablation: false,
                snr_db,
                steps: Some(k),
            })
            .collect();
        let axes: Vec<f64> = counts.iter().map(|&k| k as f64).collect();
        self.collect(SweepKind::Steps, Some(snr_db), &keys, &axes)
    }
}

/// [`Evaluator::snr_sweep`] with the configured cache directory layout.
pub fn run_snr_sweep(
    cfg: &Config,
    ae: &Checkpoint,
    dn: &Checkpoint,
    data: &Dataset,
    snr_list: &[f64],
    cache_dir: Option<&Path>,
) -> Result<SweepResult> {
    let mut ev = Evaluator::new(cfg, ae, dn, data)?;
    if let Some(d) = cache_dir {
        ev = ev.with_cache(d);
    }
    ev.snr_sweep(snr_list, cfg.eval.include_ablation)
}

/// [`Evaluator::steps_sweep`] with the configured cache directory layout.
pub fn run_steps_sweep(
    cfg: &Config,
    ae: &Checkpoint,
    dn: &Checkpoint,
    data: &Dataset,
    snr_db: f64,
    step_counts: &[usize],
    cache_dir: Option<&Path>,
) -> Result<SweepResult> {
    let mut ev = Evaluator::new(cfg, ae, dn, data)?;
    if let Some(d) = cache_dir {
        ev = ev.with_cache(d);
    }
    ev.steps_sweep(snr_db, step_counts)
}
