//! Heterogeneity-aware channel-attention graph convolution (HAGCN) for
//! multi-step traffic forecasting.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod export;
pub mod graph;
pub mod layers;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{HagcnError, Result};
