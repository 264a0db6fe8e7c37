//! Blind single-image super-resolution built on a vector-quantized
//! high-resolution texture prior.
//!
//! The crate trains in two stages. Stage one learns a discrete codebook and
//! decoder that reconstruct clean high-resolution texture patches. Stage two
//! freezes that prior and trains a low-resolution encoder that matches
//! degraded inputs onto the codebook, so restoration quality comes from
//! looked-up clean features rather than pixels of the degraded input.

pub mod autodiff;
pub mod cli;
pub mod codebook;
pub mod dataprep;
pub mod degrade;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
