//! Classifier-head ensembles for confidence calibration.
//!
//! Several linear heads are trained with different seeds on the same frozen
//! feature vectors, then combined by averaging, majority voting, or a small
//! trained metamodel. Calibration is measured with equal-width-binned
//! Expected and Maximum Calibration Error.

pub mod cli;
pub mod combiners;
pub mod data;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod numerics;

pub use error::{Error, Result};
