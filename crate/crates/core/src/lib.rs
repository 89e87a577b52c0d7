//! Reversible multi-column deblurring with per-patch adaptive exits.

pub mod autodiff;
pub mod backbone;
pub mod blocks;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod exit;
pub mod fft;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Shape, Tensor, Tensor4};
