//! Evaluation protocols, segmentation metrics, pixel-attention label
//! generation and loss kernels for large-scale unsupervised semantic
//! segmentation.
//!
//! All numerics run in 64-bit floats; the on-disk formats in [`formats`]
//! store 32-bit values and are widened on load.

pub mod error;
pub mod formats;
pub mod labelgen;
pub mod losses;
pub mod metrics;
pub mod protocols;
pub mod tensor;

pub use error::{Error, FormatError, Result};
pub use formats::{CentroidSet, Manifest, SegMask, IGNORE, OTHER};
pub use tensor::{DenseArray, MlpParams};
