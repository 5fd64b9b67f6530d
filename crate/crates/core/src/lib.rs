//! Five-grade diabetic retinopathy classification with a DenseNet121 backbone.

pub mod cli;
pub mod data;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{Error, Result};
