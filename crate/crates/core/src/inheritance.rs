//! Knowledge inheritance: keep the student close to its own previous
//! snapshot on the transfer set.

use crate::corpus::{SentencePair, TransferTuple};
use crate::error::{CkdError, Result};
use crate::filtration::{kd_loss, DivergenceKind};
use crate::model::{corpus_distributions, DistributionBatch, LossValue, Model, Predictor};

/// The previous student, frozen, and the step it will anchor.
#[derive(Debug, Clone)]
pub struct InheritanceAnchor {
    model: Model,
    pub step: usize,
}

impl InheritanceAnchor {
    /// Freezes a copy of `previous`.
    pub fn new(previous: &Model, step: usize) -> Self {
        Self { model: previous.snapshot(), step }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Anchor distributions over whole sentences.
    pub fn reference(&self, pairs: &[SentencePair]) -> Result<DistributionBatch> {
        corpus_distributions(&self.model, pairs, 64)
    }
}

/// `Σ KL(anchor ‖ student)` over every tuple.
pub fn ki_loss(anchor: &InheritanceAnchor, student: &Model, tuples: &[TransferTuple]) -> Result<LossValue> {
    if !anchor.model.is_frozen() {
        return Err(CkdError::InvalidConfig("inheritance anchor must be frozen".into()));
    }
    student.check_compatible(&anchor.model as &dyn Predictor)?;
    kd_loss(&anchor.model, student, tuples, DivergenceKind::Kl)
}
