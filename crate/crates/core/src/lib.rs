//! Desk-scale laboratory for exact and approximate Top-k attention decoding,
//! Top-k-masked fine-tuning and attention-entropy analysis on synthetic
//! long-context tasks.

pub mod attention;
pub mod error;
pub mod harness;
pub mod instrumentation;
pub mod model;
pub mod numerics;
pub mod selection;
pub mod tasks;
pub mod training;

pub use error::{LabError, Result};
