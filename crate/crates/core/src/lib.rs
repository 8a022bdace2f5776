//! Continual knowledge distillation for toy neural machine translation.
//!
//! A single student model is distilled from a stream of frozen teachers.
//! Each step filters the teacher's token-level knowledge by comparing it with
//! the student (positive KD where the teacher is better, a margin-gated
//! push-away where it is not) and anchors the student to its own previous
//! snapshot.

pub mod autograd;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod filtration;
pub mod gradcheck;
pub mod inheritance;
pub mod model;
pub mod quantify;
pub mod seed;
pub mod trainer;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{CkdError, Result};
