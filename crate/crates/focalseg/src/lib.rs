//! Focal-attention segmentation stack: a self-contained tensor/autodiff engine,
//! a window-based multi-granularity attention encoder with a convolutional
//! decoder, boundary-aware label generation, and the training/eval plumbing
//! around them. Everything runs on CPU in either f32 or f64.

pub mod archive;
pub mod attention;
pub mod bench;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod labels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
