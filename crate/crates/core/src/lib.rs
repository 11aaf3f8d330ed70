pub mod error;
pub mod lowrank;
pub mod metrics;
pub mod network;
pub mod numeric;
pub mod problems;
pub mod regularization;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
