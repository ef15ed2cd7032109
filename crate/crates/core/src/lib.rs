//! Conflict-aware sparse tuning on a desk-scale transformer.
//!
//! The crate diagnoses, per attention head, how strongly safety and utility
//! objectives pull against each other (gradient geometry times ablation
//! sensitivity), then fine-tunes budget-matched subsets of heads and measures
//! the resulting safety/utility trade-off.

pub mod alignment;
pub mod autodiff;
pub mod diagnosis;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod synthdata;

pub use error::{CastError, Result};
