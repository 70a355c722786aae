//! Question-evidence contrastive training for long-context QA.
//!
//! Sequences carry one marker token per sentence; the contextual marker
//! vectors are compared with the question marker under a per-type
//! similarity, and an InfoNCE loss over the sentences is mixed with an
//! evidence-classification loss.

pub mod checkpoint;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod similarity;
pub mod tensor;
pub mod trainer;

#[cfg(feature = "cli")]
pub mod cli;

mod par;

pub use error::{Error, Result};
