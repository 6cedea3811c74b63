use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dnsc_core::checkpoint::Checkpoint;
use dnsc_core::harness::{self, Config, Dataset, Split, SweepResult};
use dnsc_core::metrics::psnr_from_mse;
use dnsc_core::pipeline::{write_records_csv, Transceiver};
use log::info;

#[derive(Parser)]
#[command(name = "dnsc", version, about = "Latent-diffusion de-noising semantic communication")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set eval.workers=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic image set into `train.data_dir`.
    GenData {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the autoencoder.
    TrainAe {
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the diffusion de-noiser on latents of the trained autoencoder.
    TrainDiff {
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Transmit the test split once and write per-image results.
    Eval {
        #[arg(long, allow_negative_numbers = true)]
        snr: Option<f64>,
        /// Forced number of reverse steps.
        #[arg(long)]
        steps: Option<usize>,
        /// Skip the de-noiser.
        #[arg(long)]
        ablation: bool,
    },
    /// PSNR and SSIM against channel SNR.
    SweepSnr,
    /// PSNR and SSIM against the number of reverse steps at one SNR.
    SweepSteps {
        #[arg(long, allow_negative_numbers = true)]
        snr: Option<f64>,
        #[arg(long, value_delimiter = ',')]
        counts: Vec<usize>,
    },
    /// CSVs, plots and a summary from saved sweeps.
    Report {
        /// Sweep JSON files; defaults to every sweep in the run directory.
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Run {
    cfg: Config,
    dir: PathBuf,
}

impl Run {
    fn ae_path(&self) -> PathBuf {
        self.dir.join("autoencoder.ckpt")
    }

    fn dn_path(&self) -> PathBuf {
        self.dir.join("denoiser.ckpt")
    }

    fn sweeps_dir(&self) -> PathBuf {
        self.dir.join("sweeps")
    }

    fn dataset(&self) -> Result<Dataset> {
        let size = self.cfg.model.image_size;
        let data = harness::ingest_dataset(&self.cfg.train.data_dir, (size, size), self.cfg.train.test_fraction)
            .with_context(|| format!("ingesting {}", self.cfg.train.data_dir.display()))?;
        for w in &data.manifest.warnings {
            log::warn!("{w}");
        }
        std::fs::create_dir_all(&self.dir)?;
        std::fs::write(
            self.dir.join("manifest.json"),
            serde_json::to_string_pretty(&data.manifest)?,
        )?;
        Ok(data)
    }

    fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))
    }

    fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
        ckpt.save(path).with_context(|| format!("writing {}", path.display()))?;
        info!("wrote {}", path.display());
        Ok(())
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let cfg = Config::load(cli.common.config.as_deref(), std::env::vars(), &cli.common.set)?;
    let run = Run {
        dir: cfg.train.out_dir.clone(),
        cfg,
    };
    let cfg = &run.cfg;
    match cli.cmd {
        Command::GenData { count, out } => {
            let dir = out.unwrap_or_else(|| cfg.train.data_dir.clone());
            let files = harness::synth::generate(&dir, count, cfg.model.image_size, cfg.train.seed)?;
            println!("wrote {} images to {}", files.len(), dir.display());
        }
        Command::TrainAe { resume } => {
            let data = run.dataset()?;
            let resume = resume.as_deref().map(Run::load).transpose()?;
            let ckpt = harness::train_autoencoder(cfg, &data, resume.as_ref())?;
            Run::save(&ckpt, &run.ae_path())?;
        }
        Command::TrainDiff { resume } => {
            let data = run.dataset()?;
            let ae = Run::load(&run.ae_path())?;
            let resume = resume.as_deref().map(Run::load).transpose()?;
            let ckpt = harness::train_denoiser(cfg, &ae, &data, resume.as_ref())?;
            Run::save(&ckpt, &run.dn_path())?;
        }
        Command::Eval { snr, steps, ablation } => {
            let data = run.dataset()?;
            let ae = Run::load(&run.ae_path())?;
            let tx = if ablation {
                Transceiver::ablation_only(&ae, cfg.pipeline())?
            } else {
                Transceiver::new(&ae, &Run::load(&run.dn_path())?, cfg.pipeline())?
            };
            let channel = cfg.channel.with_snr(snr.unwrap_or(cfg.channel.snr_db));
            let (ids, x) = data.batch(Split::Test)?;
            let records = if ablation {
                tx.transmit_ablation(&x, &ids, &channel, cfg.channel_seed())?
            } else {
                tx.transmit(&x, &ids, &channel, steps, cfg.channel_seed(), &mut |_, _| {})?
            };
            if records.is_empty() {
                bail!("the test split is empty");
            }
            let path = run.dir.join(format!(
                "eval_snr{}_{}.csv",
                channel.snr_db,
                if ablation { "ablation".to_string() } else { steps.map_or("auto".into(), |k| k.to_string()) }
            ));
            write_records_csv(std::fs::File::create(&path)?, &records)?;
            let n = records.len() as f64;
            let mse = records.iter().map(|r| r.mse).sum::<f64>() / n;
            println!(
                "{} images at {} dB: mean PSNR {:.3} dB (PSNR of mean MSE {:.3}), mean SSIM {:.4}, t_start {}",
                records.len(),
                channel.snr_db,
                records.iter().map(|r| r.psnr).sum::<f64>() / n,
                psnr_from_mse(mse),
                records.iter().map(|r| r.ssim).sum::<f64>() / n,
                records[0].t_start
            );
            println!("per-image results: {}", path.display());
        }
        Command::SweepSnr => {
            let data = run.dataset()?;
            let (ae, dn) = (Run::load(&run.ae_path())?, Run::load(&run.dn_path())?);
            let cache = run.dir.join("cache");
            let r = harness::run_snr_sweep(cfg, &ae, &dn, &data, &cfg.eval.snr_list, Some(&cache))?;
            let path = run.sweeps_dir().join("snr.json");
            r.save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::SweepSteps { snr, counts } => {
            let data = run.dataset()?;
            let (ae, dn) = (Run::load(&run.ae_path())?, Run::load(&run.dn_path())?);
            let snr = snr.unwrap_or(cfg.eval.steps_snr_db);
            let counts = if counts.is_empty() { cfg.step_counts() } else { counts };
            let cache = run.dir.join("cache");
            let r = harness::run_steps_sweep(cfg, &ae, &dn, &data, snr, &counts, Some(&cache))?;
            let path = run.sweeps_dir().join(format!("steps_snr{snr}.json"));
            r.save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Report { inputs, out } => {
            let inputs = if inputs.is_empty() {
                let mut v: Vec<PathBuf> = std::fs::read_dir(run.sweeps_dir())
                    .with_context(|| format!("listing {}", run.sweeps_dir().display()))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "json"))
                    .collect();
                v.sort();
                v
            } else {
                inputs
            };
            let results = inputs
                .iter()
                .map(|p| SweepResult::load(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            let out = out.unwrap_or_else(|| run.dir.join("report"));
            let files = harness::emit_report(&results, &out)?;
            for p in files.csvs.iter().chain(&files.plots).chain([&files.summary]) {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
