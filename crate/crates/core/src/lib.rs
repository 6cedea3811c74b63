//! Latent-diffusion de-noising semantic communication.
//!
//! Images are compressed into latent vectors by a KL-regularized,
//! adversarially trained autoencoder, sent over an AWGN channel, cleaned by a
//! diffusion noise predictor at the receiver and finally decoded. The
//! [`harness`] module wraps the whole chain in dataset ingestion, SNR and
//! step-count sweeps and report emission.

pub mod autoencoder;
pub mod channel;
pub mod checkpoint;
pub mod diffusion;
mod error;
pub mod harness;
pub mod latent;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod schedule;
pub mod tensor_io;

pub use error::{Error, Result};
pub use latent::{ImageBatch, LatentTensor, Stage};
pub use schedule::NoiseSchedule;
