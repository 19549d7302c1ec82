pub mod dsp;
pub mod error;
pub mod labels;
pub mod metrics;
pub mod nn;
pub mod predictor;
pub mod vq;

pub use error::{Error, ErrorClass, Result};
