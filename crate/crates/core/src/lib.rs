//! Modern Hopfield network portfolio allocators, classical baselines and a
//! combinatorial purged cross-validation backtester.

pub mod app;
pub mod autodiff;
pub mod baselines;
pub mod cv;
pub mod data;
pub mod error;
pub mod hopfield;
pub mod metrics;
pub mod models;
pub mod stats;
pub mod train;

pub use error::{Error, Result};
