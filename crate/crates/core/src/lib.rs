//! Contextual anomaly detection for time series.
//!
//! A dilated causal convolutional encoder embeds a window and its context prefix; the
//! distance between the two embeddings is the anomaly score. Training mixes real labels
//! with synthetic anomalies (contextual outlier exposure, mixup, point outliers).

pub mod augment;
pub mod detector;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod nn;
pub mod series;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
