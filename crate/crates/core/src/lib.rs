pub mod container;
pub mod controller;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod rl;
pub mod synth;
pub mod cmf;
pub mod metrics;
pub mod rollout;

pub use error::{Error, Result};
