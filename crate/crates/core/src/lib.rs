//! Causal representation learning from multi-environment observations.

pub mod audit;
pub mod data;
pub mod density;
pub mod driver;
pub mod error;
pub mod eval;
pub mod graph;
pub mod jet;
pub mod model;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod scm;

pub use error::{CoreError, Result};
pub use graph::{Dag, NodePermutation, UGraph};
