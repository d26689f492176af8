//! Turn a trained two-layer ReLU feed-forward block into an equal-size
//! mixture of experts.
//!
//! The pipeline is: record activations ([`profiler`]), split the middle
//! neurons into experts ([`splitter`]), learn or derive a per-input expert
//! scorer ([`router`]), then run the restricted forward pass and calibrate
//! the second layer ([`engine`]).

pub mod data;
pub mod engine;
pub mod error;
pub mod math;
pub mod model_file;
pub mod profiler;
pub mod router;
pub mod splitter;
pub mod train;

pub use error::{Error, Result};
pub use math::{FfnWeights, Matrix, Vector};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
