pub mod config;
pub mod dataio;
pub mod dsp;
pub mod error;
pub mod kv;
pub mod model;
pub mod metrics;
pub mod numgrad;
pub mod pipeline;
pub mod scorer;
pub mod trainer;

pub use error::{AsdError, Result};
