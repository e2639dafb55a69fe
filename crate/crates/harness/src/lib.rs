//! Data, optimization and experiment drivers for the cloud transform.

pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod train;

pub use error::{HarnessError, Result};
