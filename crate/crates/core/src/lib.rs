//! Sequential recommendation benchmark: dataset pipeline, the five model
//! families, training, evaluation, emissions estimation and the experiment
//! runner.

pub mod data;
pub mod emissions;
mod error;
pub mod evaluator;
pub mod models;
pub mod runner;
pub mod seeding;
pub mod trainer;

pub use error::{DataError, ModelError, RunError, TrainError};
