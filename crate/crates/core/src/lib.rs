pub mod autograd;
pub mod cli;
pub mod crf;
pub mod datagen;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod sequence;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
