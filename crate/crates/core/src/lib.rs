//! Noised-latent autoencoders, rectified-flow surprisal estimation and
//! neural-encoding analysis on synthetic data with analytic ground truth.

pub mod autoencoder;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod metrics;
pub mod noise;
pub mod numerics;
pub mod stats;
pub mod synthdata;
pub mod trf;

pub use error::{Error, Result};
