//! Echo-state-network encoders inside a deep autoencoding Gaussian mixture
//! model, for unsupervised clustering of multivariate KPI time series.
//!
//! The crate covers data ingestion and windowing, the reservoir encoder and
//! its decoder, the mixture estimation network with sample energy, joint
//! training with hand-derived gradients, PCA / EM baselines, evaluation
//! metrics and sweeps, and a command-line front end.

pub mod autoencoder;
pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod mixture;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod reservoir;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::Matrix;
