//! World models with learned causal structure over latent dynamics, the
//! multi-body simulator used to benchmark them, and the training and
//! evaluation machinery tying the two together.
//!
//! Everything is deterministic given seeds: RNG draws happen in a fixed
//! order, reductions use fixed summation orders, and repeated runs produce
//! bit-identical parameters and metrics.
//!
//! Error convention: shape mismatches and index bugs are programming errors
//! and panic with the offending shapes named. Fallible operations (config
//! validation, divergence) return [`error::CoreError`].

pub mod dataset;
pub mod error;
pub mod eval;
pub mod gauss;
pub mod models;
pub mod opt;
pub mod sim;
pub mod structure;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{CoreError, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
