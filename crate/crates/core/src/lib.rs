//! Capability ablation with low-rank adapters on a small decoder-only
//! transformer trained from scratch.

pub mod analysis;
pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod lora;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, ErrorCategory, Result};
