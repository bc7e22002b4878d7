//! Anchor-free object detection with residual dual-scale detectors.
//!
//! Two detection heads share one backbone: a stride-8 detector for small
//! objects and a stride-32 detector that learns a residual on top of the
//! first detector's box predictions. Targets are dense per-hook maps, boxes
//! are regressed with an IoU loss, and classification is gated on box quality.

// `!(x > 0.0)` deliberately rejects NaN in config validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dataio;
pub mod encoding;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod losses;
pub mod network;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
