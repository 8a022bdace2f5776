//! Loss evaluation over a corpus.
//!
//! Every loss in the system is a function of the student's output
//! distributions. An [`Objective`] sees one chunk of sentences at a time,
//! returns its value and `dL/dp` for every unmasked row, and the engine turns
//! that into a parameter gradient through the softmax Jacobian
//! `dz = p ⊙ (g − ⟨g, p⟩)`.
//!
//! Chunks are evaluated in parallel in fixed-size groups and reduced in
//! index order, so results do not depend on the thread count.

use rayon::prelude::*;

use super::{Dropout, DistributionBatch, LossValue, Model, PROB_FLOOR};
use crate::autograd::{softmax, Mat, NodeId, Tape};
use crate::corpus::SentencePair;
use crate::error::{CkdError, Result};
use crate::seed::{derive_seed, rng_for};

/// Sentences per tape.
pub const CHUNK: usize = 16;
const GROUP: usize = 32;

pub struct RowGrads {
    pub value: f64,
    /// Same shape as the student batch; `None` when no gradient was asked for.
    pub dprobs: Option<DistributionBatch>,
    pub clamped: usize,
}

pub trait Objective: Sync {
    /// `ids[b]` is the corpus index of `seqs[b]`.
    fn eval(&self, ids: &[usize], seqs: &[SentencePair], student: &DistributionBatch, want_grad: bool)
        -> Result<RowGrads>;
}

fn lengths(seqs: &[SentencePair]) -> Vec<usize> {
    seqs.iter().map(|p| p.target.len()).collect()
}

fn forward_chunk(
    model: &Model,
    tape: &mut Tape,
    seqs: &[SentencePair],
    drop: &mut Dropout,
) -> (DistributionBatch, Vec<NodeId>) {
    let mut probs = DistributionBatch::zeros(model.vocab_size(), lengths(seqs));
    let mut nodes = Vec::with_capacity(seqs.len());
    for (b, pair) in seqs.iter().enumerate() {
        let z = model.logits(tape, pair, drop);
        let m = tape.value(z);
        for j in 0..m.rows {
            probs.row_mut(b, j).copy_from_slice(&softmax(m.row(j)));
        }
        nodes.push(z);
    }
    (probs, nodes)
}

/// Softmax backward for one sentence: rows of `p` and `g` to `dL/dz`.
fn logit_grad(probs: &DistributionBatch, dprobs: &DistributionBatch, b: usize) -> Mat {
    let (len, v) = (probs.length(b), probs.vocab_size());
    let mut out = Mat::zeros(len, v);
    for j in 0..len {
        let p = probs.row(b, j).expect("unmasked");
        let g = dprobs.row(b, j).expect("unmasked");
        let dot: f64 = p.iter().zip(g).map(|(a, c)| a * c).sum();
        for k in 0..v {
            out.data[j * v + k] = p[k] * (g[k] - dot);
        }
    }
    out
}

struct ChunkOut {
    value: f64,
    grad: Option<Vec<f64>>,
    clamped: usize,
}

fn eval_chunk(
    model: &Model,
    ids: &[usize],
    seqs: &[SentencePair],
    objective: &dyn Objective,
    want_grad: bool,
    dropout_seed: Option<u64>,
) -> Result<ChunkOut> {
    let mut tape = Tape::new(model.params(), model.layout());
    let mut drop = match dropout_seed {
        Some(seed) if model.arch().dropout > 0.0 => {
            Dropout::new(model.arch().dropout, rng_for(seed, &format!("dropout/{}", ids[0])))
        }
        _ => Dropout::off(),
    };
    let (probs, nodes) = forward_chunk(model, &mut tape, seqs, &mut drop);
    let rg = objective.eval(ids, seqs, &probs, want_grad)?;
    if !rg.value.is_finite() {
        return Err(CkdError::NonFinite(format!("loss over sentences {:?}.. is {}", ids[0], rg.value)));
    }
    let grad = if want_grad {
        let dprobs = rg
            .dprobs
            .ok_or_else(|| CkdError::InvalidConfig("objective returned no gradient".into()))?;
        let mats: Vec<Mat> = (0..seqs.len()).map(|b| logit_grad(&probs, &dprobs, b)).collect();
        let seeds: Vec<(NodeId, &Mat)> = nodes.iter().copied().zip(mats.iter()).collect();
        Some(tape.backward(&seeds))
    } else {
        None
    };
    Ok(ChunkOut { value: rg.value, grad, clamped: rg.clamped })
}

/// Evaluates `objective` over the sentences `ids` of `corpus` with the
/// model's current parameters. `dropout_seed` switches dropout on (training
/// mode).
pub fn evaluate(
    model: &Model,
    corpus: &[SentencePair],
    ids: &[usize],
    objective: &dyn Objective,
    want_grad: bool,
    dropout_seed: Option<u64>,
) -> Result<LossValue> {
    let want_grad = want_grad && !model.is_frozen();
    let mut total = LossValue { value: 0.0, grad: want_grad.then(|| vec![0.0; model.param_count()]), clamped: 0 };
    if let Some(&bad) = ids.iter().find(|&&i| i >= corpus.len()) {
        return Err(CkdError::LengthMismatch(format!("sentence {bad} of a {}-sentence corpus", corpus.len())));
    }
    let chunks: Vec<&[usize]> = ids.chunks(CHUNK).collect();
    for group in chunks.chunks(GROUP) {
        let outs: Vec<Result<ChunkOut>> = group
            .par_iter()
            .map(|&c| {
                let seqs: Vec<SentencePair> = c.iter().map(|&i| corpus[i].clone()).collect();
                let seed = dropout_seed.map(|s| derive_seed(s, "chunks"));
                eval_chunk(model, c, &seqs, objective, want_grad, seed)
            })
            .collect();
        for out in outs {
            let out = out?;
            total.value += out.value;
            total.clamped += out.clamped;
            if let (Some(t), Some(g)) = (total.grad.as_mut(), out.grad) {
                for (a, b) in t.iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
    Ok(total)
}

/// Teacher-forced distributions without dropout.
pub(crate) fn student_distributions(model: &Model, seqs: &[SentencePair]) -> Result<DistributionBatch> {
    let parts: Vec<DistributionBatch> = seqs
        .par_chunks(CHUNK)
        .map(|c| {
            let mut tape = Tape::new(model.params(), model.layout());
            forward_chunk(model, &mut tape, c, &mut Dropout::off()).0
        })
        .collect();
    DistributionBatch::concat(&parts)
}

/// `-ln max(p, floor)` and its derivative in `p` (zero when clamped).
pub fn neg_log(p: f64) -> (f64, f64, bool) {
    if p < PROB_FLOOR {
        (-PROB_FLOOR.ln(), 0.0, true)
    } else {
        (-p.ln(), -1.0 / p, false)
    }
}

/// Token-level negative log-likelihood of the gold targets.
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn eval(&self, _ids: &[usize], seqs: &[SentencePair], student: &DistributionBatch, want_grad: bool)
        -> Result<RowGrads> {
        let mut value = 0.0;
        let mut clamped = 0;
        let mut dprobs = want_grad.then(|| DistributionBatch::zeros(student.vocab_size(), lengths(seqs)));
        for (b, j) in student.positions() {
            let gold = seqs[b].target[j] as usize;
            let (v, d, c) = neg_log(student.row(b, j).expect("unmasked")[gold]);
            value += v;
            clamped += c as usize;
            if let Some(dp) = dprobs.as_mut() {
                dp.row_mut(b, j)[gold] = d;
            }
        }
        Ok(RowGrads { value, dprobs, clamped })
    }
}

/// Weighted sum of objectives over the same sentences. Zero-weight terms are
/// skipped entirely.
pub struct Weighted<'a>(pub Vec<(f64, &'a dyn Objective)>);

impl Objective for Weighted<'_> {
    fn eval(&self, ids: &[usize], seqs: &[SentencePair], student: &DistributionBatch, want_grad: bool)
        -> Result<RowGrads> {
        let mut value = 0.0;
        let mut clamped = 0;
        let mut dprobs = want_grad.then(|| DistributionBatch::zeros(student.vocab_size(), lengths(seqs)));
        for &(w, obj) in &self.0 {
            if w == 0.0 {
                continue;
            }
            let rg = obj.eval(ids, seqs, student, want_grad)?;
            value += w * rg.value;
            clamped += rg.clamped;
            if let (Some(dp), Some(g)) = (dprobs.as_mut(), rg.dprobs.as_ref()) {
                dp.add_scaled(g, w);
            }
        }
        Ok(RowGrads { value, dprobs, clamped })
    }
}

/// Diagonal Fisher estimate: squared per-token CE gradients, averaged over
/// every target token of `seqs`.
pub fn fisher_diagonal(model: &Model, seqs: &[SentencePair]) -> Result<Vec<f64>> {
    if seqs.is_empty() {
        return Err(CkdError::Empty("no sentences for the Fisher estimate"));
    }
    let n = model.param_count();
    let tokens: usize = seqs.iter().map(|p| p.target.len()).sum();
    let mut fisher = vec![0.0; n];
    for group in seqs.chunks(CHUNK * GROUP) {
        let parts: Vec<Vec<f64>> = group
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut acc = vec![0.0; n];
                for pair in chunk {
                    let mut tape = Tape::new(model.params(), model.layout());
                    let z = model.logits(&mut tape, pair, &mut Dropout::off());
                    let m = tape.value(z).clone();
                    for j in 0..m.rows {
                        let p = softmax(m.row(j));
                        let gold = pair.target[j] as usize;
                        let mut seed = Mat::zeros(m.rows, m.cols);
                        for (k, pk) in p.iter().enumerate() {
                            seed.data[j * m.cols + k] = pk - if k == gold { 1.0 } else { 0.0 };
                        }
                        let g = tape.backward(&[(z, &seed)]);
                        for (a, b) in acc.iter_mut().zip(g) {
                            *a += b * b;
                        }
                    }
                }
                acc
            })
            .collect();
        for part in parts {
            for (a, b) in fisher.iter_mut().zip(part) {
                *a += b;
            }
        }
    }
    for f in &mut fisher {
        *f /= tokens as f64;
    }
    Ok(fisher)
}
