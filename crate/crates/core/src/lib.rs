//! Desk-scale age estimation from multi-view feature aggregation.
//!
//! Each sample's raw feature vector is expanded into K stochastic views,
//! embedded by a trainable linear stem, fused by a Transformer encoder read
//! out at a learnt class token, and decoded by a hierarchical head: a
//! classifier over discrete age bins plus one residual regressor per bin,
//! combined by expectation. Everything runs on a small f64 reverse-mode
//! autodiff tape; no external ML framework.

pub mod audit;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod ops;
pub mod model;
pub mod optim;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Mode, Tape};
pub use tensor::Tensor;
