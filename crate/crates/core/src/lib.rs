//! Exemplar-memory invariance learning for unsupervised domain adaptive
//! re-identification, plus a synthetic two-domain benchmark to exercise it.

pub mod cli;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod invariance;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
