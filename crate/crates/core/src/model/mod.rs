//! Translation models: per-token predictive distributions, gradient updates,
//! frozen snapshots and greedy decoding.
//!
//! Two toy families stand in for heterogeneous architectures. They share the
//! vocabulary and differ in everything else; distillation only ever looks at
//! their output distributions.

mod attention;
pub mod checkpoint;
pub mod engine;
pub mod optim;
mod recurrent;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use self::engine::{evaluate, Objective, RowGrads};
pub use self::optim::{Adam, OptimizerConfig};
use self::attention::AttentionNet;
use self::recurrent::RecurrentNet;
use crate::autograd::{Init, Mat, NodeId, ParamLayout, Tape};
use crate::corpus::{SentencePair, Vocab, BOS, EOS};
use crate::error::{CkdError, Result};
use crate::seed::{rng_for, Rng};

/// Floor applied to probabilities before any logarithm.
pub const PROB_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchFamily {
    Attention,
    Recurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub family: ArchFamily,
    pub embed_dim: usize,
    /// FFN width for the attention family, GRU state size for the recurrent one.
    pub hidden_dim: usize,
    pub layers: usize,
    /// Longest source or target sentence (EOS excluded) the model expects.
    pub max_len: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.layers == 0 || self.max_len == 0 {
            return Err(CkdError::InvalidConfig(format!("architecture dimensions must be > 0: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CkdError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

pub(crate) trait NetLayout {
    fn encode(&self, tape: &mut Tape, source: &[usize], drop: &mut Dropout) -> NodeId;
    fn decode(&self, tape: &mut Tape, memory: NodeId, target_in: &[usize], drop: &mut Dropout) -> NodeId;
}

#[derive(Debug, Clone)]
enum Net {
    Attention(AttentionNet),
    Recurrent(RecurrentNet),
}

impl Net {
    fn build(arch: &ArchConfig, vocab_size: usize) -> (Self, ParamLayout) {
        let mut layout = ParamLayout::new();
        let net = match arch.family {
            ArchFamily::Attention => Net::Attention(AttentionNet::build(arch, vocab_size, &mut layout)),
            ArchFamily::Recurrent => Net::Recurrent(RecurrentNet::build(arch, vocab_size, &mut layout)),
        };
        (net, layout)
    }

    fn as_layout(&self) -> &dyn NetLayout {
        match self {
            Net::Attention(n) => n,
            Net::Recurrent(n) => n,
        }
    }
}

/// Inverted dropout; a no-op unless built with a generator.
pub struct Dropout {
    rate: f64,
    rng: Option<Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub(crate) fn apply(&mut self, tape: &mut Tape, x: NodeId) -> NodeId {
        let Some(rng) = self.rng.as_mut() else { return x };
        if self.rate <= 0.0 {
            return x;
        }
        let (rows, cols) = (tape.value(x).rows, tape.value(x).cols);
        let keep = 1.0 / (1.0 - self.rate);
        let mask: Vec<f64> = (0..rows * cols)
            .map(|_| if rng.random::<f64>() < self.rate { 0.0 } else { keep })
            .collect();
        let m = tape.input(Mat::from_vec(rows, cols, mask));
        tape.mul(x, m)
    }
}

/// Teacher-forced distributions for a batch of sentences, padded to the
/// longest target. Position `j` (0-based) of sentence `b` is the prediction
/// of `y_{j+1}` given `y_1..y_j`; rows at `j >= length(b)` are masked.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionBatch {
    vocab_size: usize,
    max_len: usize,
    lengths: Vec<usize>,
    probs: Vec<f64>,
}

impl DistributionBatch {
    pub fn zeros(vocab_size: usize, lengths: Vec<usize>) -> Self {
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        Self { vocab_size, max_len, probs: vec![0.0; lengths.len() * max_len * vocab_size], lengths }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn length(&self, b: usize) -> usize {
        self.lengths[b]
    }

    pub fn is_masked(&self, b: usize, j: usize) -> bool {
        j >= self.lengths[b]
    }

    fn offset(&self, b: usize, j: usize) -> usize {
        (b * self.max_len + j) * self.vocab_size
    }

    pub fn row(&self, b: usize, j: usize) -> Option<&[f64]> {
        if self.is_masked(b, j) {
            return None;
        }
        let o = self.offset(b, j);
        Some(&self.probs[o..o + self.vocab_size])
    }

    pub fn row_mut(&mut self, b: usize, j: usize) -> &mut [f64] {
        assert!(!self.is_masked(b, j), "row ({b}, {j}) is masked");
        let o = self.offset(b, j);
        &mut self.probs[o..o + self.vocab_size]
    }

    /// `(sentence, position)` of every unmasked row, sentence-major.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.lengths.iter().enumerate().flat_map(|(b, &len)| (0..len).map(move |j| (b, j)))
    }

    pub fn num_rows(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Every unmasked row sums to one within `tol` and is non-negative.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for (b, j) in self.positions() {
            let row = self.row(b, j).expect("unmasked");
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > tol || row.iter().any(|p| !(*p >= 0.0)) {
                return Err(CkdError::InvalidDistribution(format!("row ({b}, {j}) sums to {s}")));
            }
        }
        Ok(())
    }

    /// `self += w * other` over every entry; shapes must match.
    pub fn add_scaled(&mut self, other: &DistributionBatch, w: f64) {
        assert_eq!(self.lengths, other.lengths, "batch shapes differ");
        for (a, b) in self.probs.iter_mut().zip(&other.probs) {
            *a += w * b;
        }
    }

    /// Concatenates batches along the sentence axis.
    pub fn concat(parts: &[DistributionBatch]) -> Result<Self> {
        let vocab = parts.first().map(|p| p.vocab_size).ok_or(CkdError::Empty("no batches to concatenate"))?;
        let lengths: Vec<usize> = parts.iter().flat_map(|p| p.lengths.iter().copied()).collect();
        let mut out = Self::zeros(vocab, lengths);
        let mut b0 = 0;
        for p in parts {
            if p.vocab_size != vocab {
                return Err(CkdError::VocabMismatch("batches over different vocabularies".into()));
            }
            for (b, j) in p.positions() {
                out.row_mut(b0 + b, j).copy_from_slice(p.row(b, j).expect("unmasked"));
            }
            b0 += p.batch_size();
        }
        Ok(out)
    }

    /// Sentences `start..start+len` as a new batch.
    pub fn slice(&self, start: usize, len: usize) -> Self {
        let lengths = self.lengths[start..start + len].to_vec();
        let mut out = Self::zeros(self.vocab_size, lengths);
        for (b, j) in out.positions().collect::<Vec<_>>() {
            out.row_mut(b, j).copy_from_slice(self.row(start + b, j).expect("unmasked"));
        }
        out
    }
}

/// Anything that yields teacher-forced distributions: trained models and
/// wrappers around them.
pub trait Predictor: Sync {
    fn vocab_size(&self) -> usize;
    fn vocab_hash(&self) -> &str;
    fn is_frozen(&self) -> bool;
    fn forward_distributions(&self, batch: &[SentencePair]) -> Result<DistributionBatch>;
}

/// Distributions over a whole corpus, computed `batch_size` sentences at a
/// time (the batch boundary matters for wrappers that act per batch).
pub fn corpus_distributions(
    model: &dyn Predictor,
    pairs: &[SentencePair],
    batch_size: usize,
) -> Result<DistributionBatch> {
    if pairs.is_empty() {
        return Err(CkdError::Empty("no sentences"));
    }
    let parts = pairs
        .chunks(batch_size.max(1))
        .map(|c| model.forward_distributions(c))
        .collect::<Result<Vec<_>>>()?;
    DistributionBatch::concat(&parts)
}

/// A scalar loss and, when the model is trainable, its gradient with respect
/// to the flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Option<Vec<f64>>,
    /// Number of probabilities clamped at [`PROB_FLOOR`].
    pub clamped: usize,
}

impl LossValue {
    pub fn zero(params: usize) -> Self {
        Self { value: 0.0, grad: Some(vec![0.0; params]), clamped: 0 }
    }

    pub fn has_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// `self + weight * other`, gradients included.
    pub fn add_scaled(&mut self, other: &LossValue, weight: f64) {
        self.value += weight * other.value;
        self.clamped += other.clamped;
        match (&mut self.grad, &other.grad) {
            (Some(g), Some(o)) => {
                for (a, b) in g.iter_mut().zip(o) {
                    *a += weight * b;
                }
            }
            (g @ None, Some(o)) => *g = Some(o.iter().map(|b| weight * b).collect()),
            _ => {}
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    arch: ArchConfig,
    vocab_size: usize,
    vocab_hash: String,
    layout: ParamLayout,
    net: Net,
    params: Vec<f64>,
    frozen: bool,
    /// Free-form metadata carried into checkpoints (domain name, flags).
    pub meta: BTreeMap<String, String>,
}

/// Parameters are kept exactly representable in `f32`, so checkpoints
/// round-trip bit for bit.
fn round_f32(params: &mut [f64]) {
    for p in params {
        *p = *p as f32 as f64;
    }
}

impl Model {
    pub fn new(arch: &ArchConfig, vocab: &Vocab, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (net, layout) = Net::build(arch, vocab.len());
        let mut rng = rng_for(seed, "init");
        let mut params = vec![0.0; layout.total()];
        for spec in layout.specs() {
            let slot = &mut params[spec.offset..spec.offset + spec.rows * spec.cols];
            match spec.init {
                Init::Zeros => slot.fill(0.0),
                Init::Ones => slot.fill(1.0),
                Init::FanIn(s) => {
                    let a = s / (spec.rows as f64).sqrt();
                    slot.iter_mut().for_each(|v| *v = rng.random_range(-a..a));
                }
                Init::Uniform(a) => slot.iter_mut().for_each(|v| *v = rng.random_range(-a..a)),
            }
        }
        round_f32(&mut params);
        Ok(Self {
            arch: arch.clone(),
            vocab_size: vocab.len(),
            vocab_hash: vocab.content_hash(),
            layout,
            net,
            params,
            frozen: false,
            meta: BTreeMap::new(),
        })
    }

    pub(crate) fn from_parts(
        arch: ArchConfig,
        vocab_size: usize,
        vocab_hash: String,
        params: Vec<f64>,
        frozen: bool,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        arch.validate()?;
        let (net, layout) = Net::build(&arch, vocab_size);
        if layout.total() != params.len() {
            return Err(CkdError::Format(format!(
                "checkpoint holds {} parameters, architecture needs {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(Self { arch, vocab_size, vocab_hash, layout, net, params, frozen, meta })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    /// Replaces the parameters of a trainable model. Values are not rounded,
    /// which finite-difference checks rely on.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<()> {
        if self.frozen {
            return Err(CkdError::Frozen);
        }
        if params.len() != self.params.len() {
            return Err(CkdError::LengthMismatch(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params = params;
        Ok(())
    }

    /// Content hash of the parameters; frozen models must never change it.
    pub fn param_hash(&self) -> String {
        let bytes: Vec<u8> = self.params.iter().flat_map(|p| p.to_le_bytes()).collect();
        crate::seed::sha256_hex(&bytes)
    }

    /// Frozen deep copy.
    pub fn snapshot(&self) -> Model {
        let mut m = self.clone();
        m.frozen = true;
        m
    }

    /// Trainable deep copy (used to start a student from a checkpoint).
    pub fn thawed(&self) -> Model {
        let mut m = self.clone();
        m.frozen = false;
        m
    }

    pub fn check_compatible(&self, other: &dyn Predictor) -> Result<()> {
        if self.vocab_size != other.vocab_size() || self.vocab_hash != other.vocab_hash() {
            return Err(CkdError::VocabMismatch(format!(
                "models built on different vocabularies ({} vs {} tokens)",
                self.vocab_size,
                other.vocab_size()
            )));
        }
        Ok(())
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if self.vocab_size != vocab.len() || self.vocab_hash != vocab.content_hash() {
            return Err(CkdError::VocabMismatch("model and corpus vocabularies differ".into()));
        }
        Ok(())
    }

    fn check_inputs(&self, batch: &[SentencePair]) -> Result<()> {
        if batch.is_empty() {
            return Err(CkdError::Empty("empty batch"));
        }
        for p in batch {
            if p.source.is_empty() || p.target.is_empty() {
                return Err(CkdError::Empty("empty sentence"));
            }
            for &id in p.source.iter().chain(&p.target) {
                if id as usize >= self.vocab_size {
                    return Err(CkdError::TokenOutOfRange { id, size: self.vocab_size });
                }
            }
        }
        if let Some(i) = self.params.iter().position(|p| !p.is_finite()) {
            return Err(CkdError::NonFinite(format!("parameter {i} is {}", self.params[i])));
        }
        Ok(())
    }

    /// Logit node for one teacher-forced sentence (one row per target position).
    pub(crate) fn logits(&self, tape: &mut Tape, pair: &SentencePair, drop: &mut Dropout) -> NodeId {
        let net = self.net.as_layout();
        let src: Vec<usize> = pair.source.iter().map(|&t| t as usize).chain([EOS as usize]).collect();
        let tgt_in: Vec<usize> = std::iter::once(BOS as usize)
            .chain(pair.target[..pair.target.len() - 1].iter().map(|&t| t as usize))
            .collect();
        let memory = net.encode(tape, &src, drop);
        net.decode(tape, memory, &tgt_in, drop)
    }

    /// Argmax decoding, lowest token id wins ties. Stops at EOS (not
    /// included in the output) or after `max_len` tokens.
    pub fn greedy_decode(&self, source: &[u32], max_len: usize) -> Vec<u32> {
        let net = self.net.as_layout();
        let mut tape = Tape::new(&self.params, &self.layout);
        let mut drop = Dropout::off();
        let src: Vec<usize> = source.iter().map(|&t| t as usize).chain([EOS as usize]).collect();
        let memory = net.encode(&mut tape, &src, &mut drop);
        let mut out: Vec<u32> = Vec::new();
        while out.len() < max_len {
            let tgt_in: Vec<usize> = std::iter::once(BOS as usize).chain(out.iter().map(|&t| t as usize)).collect();
            let logits = net.decode(&mut tape, memory, &tgt_in, &mut drop);
            let m = tape.value(logits);
            let next = argmax(m.row(m.rows - 1)) as u32;
            if next == EOS {
                break;
            }
            out.push(next);
        }
        out
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    pub(crate) fn params_mut(&mut self) -> Result<&mut Vec<f64>> {
        if self.frozen {
            return Err(CkdError::Frozen);
        }
        Ok(&mut self.params)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

impl Predictor for Model {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn vocab_hash(&self) -> &str {
        &self.vocab_hash
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn forward_distributions(&self, batch: &[SentencePair]) -> Result<DistributionBatch> {
        self.check_inputs(batch)?;
        engine::student_distributions(self, batch)
    }
}

impl<T: Predictor + ?Sized> Predictor for &T {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn vocab_hash(&self) -> &str {
        (**self).vocab_hash()
    }

    fn is_frozen(&self) -> bool {
        (**self).is_frozen()
    }

    fn forward_distributions(&self, batch: &[SentencePair]) -> Result<DistributionBatch> {
        (**self).forward_distributions(batch)
    }
}

/// Summed token negative log-likelihood `Σ -ln P(y_j | y_<j, x)`.
pub fn ce_loss(model: &Model, batch: &[SentencePair]) -> Result<LossValue> {
    model.check_inputs(batch)?;
    let ids: Vec<usize> = (0..batch.len()).collect();
    evaluate(model, batch, &ids, &engine::CrossEntropy, !model.is_frozen(), None)
}

/// One optimizer update from a loss that carries gradients.
pub fn train_step(model: &mut Model, loss: &LossValue, opt: &mut Adam) -> Result<()> {
    if model.is_frozen() {
        return Err(CkdError::Frozen);
    }
    let grad = loss
        .grad
        .as_ref()
        .ok_or_else(|| CkdError::InvalidConfig("loss carries no gradient".into()))?;
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(CkdError::NonFinite(format!(
            "gradient entry {i} is {} (loss value {})",
            grad[i], loss.value
        )));
    }
    let params = model.params_mut()?;
    opt.step(params, grad)?;
    round_f32(params);
    Ok(())
}

#[cfg(test)]
mod tests;
