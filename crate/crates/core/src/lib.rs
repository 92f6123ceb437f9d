//! Point Attention Transformers on a small reverse-mode autodiff core.

pub mod attention;
pub mod cli;
pub mod dataio;
pub mod embedding;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod props;
pub mod sampling;
pub mod tensor;

pub use error::{PatError, Result};
pub use tensor::{Real, Tape, Tensor, Var};
