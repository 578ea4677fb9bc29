pub mod calibrate;
pub mod dataset;
pub mod diff;
pub mod error;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod posterior;
pub mod rng;
pub mod sampler;
pub mod simulators;
pub mod stats;
pub mod surrogate;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
