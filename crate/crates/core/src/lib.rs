//! Diagonal deep state-space models with float training, fixed-point
//! quantization and a neuromorphic execution simulator.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod quant;
pub mod scalar;
pub mod sim;
pub mod ssm;
pub mod train;

pub use error::{Error, Result};
pub use parallel::ExecPolicy;
