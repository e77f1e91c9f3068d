pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod metrics;
pub mod prompt;
pub mod rng;
pub mod runner;
pub mod task;
pub mod tensor;

pub use error::{PclError, Result};
