//! Scale-wise convolution networks (SCN) for image restoration.
//!
//! The crate bundles a small dense-tensor engine with reverse-mode
//! differentiation, the scale-wise convolution operator over feature
//! pyramids, the restoration architectures built from it, and the data,
//! training and evaluation machinery needed to train and compare them.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod pyramid;
pub mod ratio;
pub mod resample;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Result, ScnError};
pub use ratio::Ratio;
pub use tensor::{Fill, Tensor};
