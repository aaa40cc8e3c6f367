//! Noise-robust cross-view tile retrieval laboratory.
//!
//! The crate generates paired "aerial"/"overhead" tiles with controlled
//! spatial misalignment, trains two small embedding networks that exchange
//! clean/noisy sample partitions and uncertainty-guided augmentations, and
//! evaluates retrieval quality against a gridded gallery.

pub mod augment;
pub mod config;
pub mod cotrain;
pub mod encoder;
pub mod losses;
pub mod metrics;
pub mod partition;
pub mod pipeline;
pub mod rng;
pub mod special;
pub mod synth;
pub mod tensor;

use thiserror::Error;

/// Crate-level error with the failure classes the CLI maps to exit codes.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Tensor(#[from] tensor::TensorError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numerical(_) | Error::Tensor(_) => 4,
        }
    }
}
