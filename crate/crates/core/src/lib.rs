pub mod config;
pub mod dataio;
pub mod dethead;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod experiment;
pub mod geometry;
pub mod introspect;
pub mod model;
pub mod nn;
pub mod params;
pub mod report;
pub mod rng;
pub mod seghead;
pub mod tide;
pub mod trainer;

pub use error::{Error, Result};
