//! Dense tensors, a gradient tape, the Adam optimizer and checkpoint I/O.
//!
//! Training and gradient checks run in `f64`.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod params;
mod random;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamEntry, CHECKPOINT_FORMAT};
pub use params::{ParamId, ParamSet};
pub use random::{dropout_mask, seeded_rng, truncated_normal, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}
