//! State-feedback selective state space models (COFFEE) and the S6 baseline.

pub mod error;
pub mod numerics;
pub mod parallel;
pub mod pipeline;
pub mod ssm;
pub mod tasks;
pub mod train;

pub use error::{CoffeeError, Result};
