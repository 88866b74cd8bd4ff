pub mod config;
pub mod dataset;
pub mod error;
pub mod frontend;
pub mod fusion;
pub mod metrics;
pub mod par;
pub mod params;
pub mod pipeline;
pub mod prob;
pub mod rng;
pub mod scene;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
