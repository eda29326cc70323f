//! Contrastive image-text posture classification at desk scale.

pub mod autograd;
pub mod baseline;
pub mod cli;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod prompts;
pub mod raster;
pub mod seeding;
pub mod synth;
pub mod taxonomy;
pub mod training;
pub mod tensor;

pub use error::{Error, Result};
