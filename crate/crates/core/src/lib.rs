pub mod backbone;
pub mod cli;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod sampler;
pub mod seeds;
pub mod synthgen;
pub mod teem;
pub mod trainer;

pub use error::{Error, Result};
