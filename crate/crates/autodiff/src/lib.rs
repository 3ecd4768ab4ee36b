//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Tensors are rank ≤ 3, row-major, 64-bit. A [`Tape`] records every
//! forward op; [`Tape::backward`] walks the records in reverse creation
//! order, which is a valid reverse topological order because an op can only
//! reference nodes created before it.

mod adam;
mod checkpoint;
mod error;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry};
pub use error::AutodiffError;
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// `½ log 2π`, the per-element constant of the Gaussian negative log-likelihood.
pub const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
