//! Experiment shell: configuration, dataset ingestion, sweeps and reports.

mod config;
mod dataset;
mod experiment;
mod report;
pub mod stats;
mod sweep;
pub mod synth;

pub use config::{scaled_step_counts, Config, EvalSection, TrainSection, ENV_PREFIX};
pub use dataset::{ingest_dataset, is_test, Dataset, DatasetManifest, ManifestItem, Split, NORMALIZATION};
pub use experiment::{stage1_data, stage1_trainer, stage2_source, train_autoencoder, train_denoiser};
pub use report::{emit_report, sweep_csv, ReportFiles};
pub use sweep::{
    run_snr_sweep, run_steps_sweep, Evaluator, PointKey, Sample, Series, SweepKind, SweepPoint, SweepResult,
    ABLATION_SERIES, FULL_SERIES,
};
