//! Anomaly-aware test-time adaptation for dense out-of-distribution
//! detection on a small BN-equipped segmentation network.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapt;
pub mod archive;
pub mod calibration;
pub mod checkpoint;
pub mod corrupt;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod ood;
pub mod optim;
pub mod scene;
pub mod selective_bn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
