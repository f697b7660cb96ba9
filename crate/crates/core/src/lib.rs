//! Vision-aided mmWave blockage prediction: scenario simulation, dataset
//! construction, the dual-modality predictor and its training harness.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod scene;
pub mod wireless;

pub use error::{Error, ErrorKind, Result};
