use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autoencoder::{AutoencoderConfig, TrainOptions};
use crate::channel::ChannelConfig;
use crate::diffusion::DiffusionConfig;
use crate::diffusion::LatentMode;
use crate::pipeline::{PipelineOptions, ScaleRecovery};
use crate::{Error, Result};

/// Environment variables with this prefix override config keys;
/// `DNSC_EVAL__WORKERS=4` sets `eval.workers`.
pub const ENV_PREFIX: &str = "DNSC_";

/// `[train]`: data location, master seed and first-stage loop control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Share of images (by content hash) held out for testing.
    pub test_fraction: f64,
    /// Every n-th training image is used for validation (0 disables).
    pub val_every: usize,
    pub epochs: usize,
    pub patience: usize,
    pub adv_warmup: f64,
    pub disc_learning_rate: f64,
    pub lr_floor: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let o = TrainOptions::default();
        Self {
            seed: 0,
            data_dir: PathBuf::from("data/toy"),
            out_dir: PathBuf::from("runs/toy"),
            test_fraction: 0.25,
            val_every: 10,
            epochs: o.epochs,
            patience: o.patience,
            adv_warmup: o.adv_warmup,
            disc_learning_rate: o.disc_learning_rate,
            lr_floor: o.lr_floor,
        }
    }
}

impl TrainSection {
    pub fn options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            patience: self.patience,
            adv_warmup: self.adv_warmup,
            disc_learning_rate: self.disc_learning_rate,
            lr_floor: self.lr_floor,
        }
    }
}

/// `[eval]`: sweep axes and execution settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub snr_list: Vec<f64>,
    pub include_ablation: bool,
    /// SNR of the step-count sweep.
    pub steps_snr_db: f64,
    /// Explicit step counts; empty means the four proportional defaults.
    pub step_counts: Vec<usize>,
    pub batch_size: usize,
    pub workers: usize,
    /// Upper bound on evaluated test images (0 = all).
    pub max_images: usize,
    pub latent_mode: LatentMode,
    pub scale_recovery: ScaleRecovery,
    pub keep_latents: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            snr_list: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            include_ablation: true,
            steps_snr_db: 10.0,
            step_counts: Vec::new(),
            batch_size: 64,
            workers: 1,
            max_images: 0,
            latent_mode: LatentMode::Sample,
            scale_recovery: ScaleRecovery::SideInfo,
            keep_latents: false,
        }
    }
}

/// Complete experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: AutoencoderConfig,
    pub train: TrainSection,
    pub channel: ChannelConfig,
    pub diffusion: DiffusionConfig,
    pub eval: EvalSection,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parses a TOML value literal, falling back to a bare string.
fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Value, dotted: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').filter(|p| !p.is_empty()).collect();
    if parts.is_empty() {
        return Err(Error::Config(format!("empty override key in {dotted:?}")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{dotted}: {p} is not a section")))?;
        node = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    node.as_table_mut()
        .ok_or_else(|| Error::Config(format!("{dotted}: parent is not a section")))?
        .insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl Config {
    /// Layers defaults, an optional file, environment variables and
    /// `key=value` overrides, later layers winning.
    pub fn load(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[String],
    ) -> Result<Self> {
        let mut root = toml::Value::try_from(Config::default())
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(Error::at(path))?;
            let table: toml::Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut root, toml::Value::Table(table));
        }
        let mut env: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.contains("__"))
            .collect();
        env.sort();
        for (k, v) in env {
            let key = k[ENV_PREFIX.len()..].to_lowercase().replace("__", ".");
            set_path(&mut root, &key, parse_literal(&v))?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut root, k.trim(), parse_literal(v.trim()))?;
        }
        let cfg: Config = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.options().validate()?;
        self.channel.validate()?;
        self.diffusion.validate()?;
        if !(0.0..1.0).contains(&self.train.test_fraction) {
            return Err(Error::Config("train.test_fraction must lie in [0, 1)".into()));
        }
        if self.eval.batch_size == 0 || self.eval.workers == 0 {
            return Err(Error::Config("eval.batch_size and eval.workers must be positive".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Seed for channel and reverse-process noise.
    pub fn channel_seed(&self) -> u64 {
        self.channel
            .seed
            .unwrap_or_else(|| crate::rng::child_seed(self.train.seed, "channel"))
    }

    pub fn pipeline(&self) -> PipelineOptions {
        PipelineOptions {
            latent_mode: self.eval.latent_mode,
            scale_recovery: self.eval.scale_recovery,
            sigma: self.diffusion.sigma,
            keep_latents: self.eval.keep_latents,
        }
    }

    /// Default step counts: the ratios 1:2:3:4 over 13 of the schedule length.
    pub fn step_counts(&self) -> Vec<usize> {
        if self.eval.step_counts.is_empty() {
            scaled_step_counts(self.diffusion.steps)
        } else {
            self.eval.step_counts.clone()
        }
    }
}

/// `round(i·T/13)` for `i = 1..=4`.
pub fn scaled_step_counts(steps: usize) -> Vec<usize> {
    (1..=4)
        .map(|i| (i as f64 * steps as f64 / 13.0).round() as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_count_scaling() {
        assert_eq!(scaled_step_counts(200), vec![15, 31, 46, 62]);
        assert_eq!(scaled_step_counts(1000)[0], 77);
    }

    #[test]
    fn precedence_cli_over_env_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[channel]\nsnr_db = 3.0\n[eval]\nworkers = 2\n[train]\nseed = 5\n").unwrap();
        let env = vec![
            ("DNSC_EVAL__WORKERS".to_string(), "3".to_string()),
            ("DNSC_TRAIN__SEED".to_string(), "6".to_string()),
            ("UNRELATED".to_string(), "x".to_string()),
        ];
        let cfg = Config::load(Some(&p), env, &["train.seed=7".into()]).unwrap();
        assert_eq!(cfg.channel.snr_db, 3.0);
        assert_eq!(cfg.eval.workers, 3);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.model, AutoencoderConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(Config::load(None, vec![], &["model.nonsense=1".into()]).is_err());
        assert!(Config::from_toml_str("[bogus]\nx = 1\n").is_err());
        assert!(Config::load(None, vec![], &["noequals".into()]).is_err());
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let mut cfg = Config::default();
        cfg.channel.norm_mode = crate::channel::NormMode::PaperNorm;
        let back = Config::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(Config::default().hash(), cfg.hash());
    }
}
