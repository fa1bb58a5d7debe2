//! Detection of faulty machines in distributed training jobs from host
//! monitoring metrics.
//!
//! Per-metric LSTM-VAE models denoise sliding windows of each machine's
//! series; the machine whose denoised window sits farthest from its peers is
//! flagged when the gap is large and persists. A decision tree over
//! per-machine Z-scores orders metrics by how strongly they separate faulty
//! from healthy tasks.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod baselines;
pub mod detector;
pub mod error;
pub mod eval;
pub mod metric;
pub mod pipeline;
pub mod prioritization;
pub mod simulator;
pub mod tensor;
pub mod trace;
pub mod vae;
pub mod workflow;

pub use error::{Error, Result};
pub use metric::{Bounds, MetricCatalog, MetricKind};
