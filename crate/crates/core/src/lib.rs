//! Attribution of painted surfaces from optical-profilometry height maps.
//!
//! The pipeline: [`surface`] loads and detrends scans, [`patching`] cuts them
//! into classifier inputs, [`density`] provides the single-pixel
//! maximum-likelihood baseline, [`convnet`] trains convolutional ensembles,
//! [`emd`] splits surfaces into intrinsic mode functions, [`metrics`] scores
//! predictions and [`experiments`] orchestrates the studies. [`synth`]
//! generates brushwork corpora with known authorship.

// `!(x > 0.0)` guards also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod convnet;
pub mod density;
pub mod emd;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod metrics;
pub mod patching;
pub mod seed;
pub mod surface;
pub mod synth;

pub use error::{Error, Result};
pub use grid::Grid;
