//! Exposure-stack HDR reconstruction with an overlapped-window VQ codebook.

pub mod autoencoder;
pub mod checkpoint;
pub mod codebook;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod hdrnet;
pub mod image;
pub mod nn;
pub mod radiometry;

pub use error::{Error, Result};
