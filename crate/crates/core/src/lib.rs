//! Lossy latent-space bottlenecks: vector quantization versus sparse
//! dictionary learning, with a small affine autoencoder, metrics, and an
//! experiment harness.

pub mod autoencoder;
pub mod bottleneck;
pub mod cli;
pub mod data_io;
pub mod dictionary;
pub mod error;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod sparse_coding;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
