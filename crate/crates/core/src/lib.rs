//! Robustness editing laboratory for small decoder-only transformers.
//!
//! The pipeline localizes the layer whose hidden states best restore the
//! behavior of an original prompt when patched into a perturbed one
//! ([`tracing`]), edits that layer's MLP down-projection so perturbed states
//! align with original ones ([`editing`]), and measures the outcome with
//! pass@k, restoration improvement, and held-out generalization
//! ([`evaluation`]).

pub mod editing;
pub mod error;
pub mod evaluation;
pub mod kernels;
pub mod model;
pub mod perturb;
pub mod seed;
pub mod tracing;

pub use error::{Error, Result};
pub use kernels::Matrix;
pub use model::{ModelBundle, ModelConfig};
