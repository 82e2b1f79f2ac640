//! Multi-path time-series forecaster: a graph-attention Neural ODE over a
//! correlation graph of the input features, fused with a wavelet-style
//! convolution path, a learnable frequency path and a direct dense path.
//!
//! The crate also carries the surrounding pipeline: CSV ingestion and
//! cleaning, feature engineering, boosted-tree feature selection,
//! training, error analysis and Shapley attribution.

pub mod diffcore;
pub mod error;
pub mod explain;
pub mod features;
pub mod graph;
pub mod ingest;
pub mod metrics;
pub mod model;
pub mod odesolve;
pub mod select;
pub mod train;

pub use error::{Error, Result};
