pub mod artifacts;
pub mod config;
pub mod error;
pub mod estimator;
pub mod geo;
pub mod ingest;
pub mod panel;
pub mod pipeline;
pub mod segregation;
pub mod stays;
pub mod synth;
pub mod time;

pub use error::{Error, Result};
