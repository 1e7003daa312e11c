//! Multi-head attention encoder-decoder for probabilistic trajectory
//! forecasting of multiple highway vehicles.

pub mod error;
pub mod attention;
pub mod baselines;
pub mod config;
pub mod data;
pub mod evaluation;
pub mod graph;
pub mod kv;
pub mod model;
pub mod training;

pub use error::{Error, Result};
