//! Task-success classifiers for robot manipulation learned from a handful of
//! demonstrations: data handling, the eight classifier architectures,
//! supervised and adversarial training regimes, and evaluation.

pub mod backbones;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod rng;
pub mod seq2seq;
pub mod synthgen;
pub mod training;

pub use error::{Result, SclError};
