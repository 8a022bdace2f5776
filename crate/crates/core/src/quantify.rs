//! Token-level quantification functions and the correlation study used to
//! choose between them.
//!
//! Every score has a raw value (as the function is usually written) and an
//! oriented value where higher always means a better prediction. Teacher and
//! student are compared on the oriented value.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{CkdError, Result};
use crate::eval::model_bleu;
use crate::model::{argmax, corpus_distributions, Model, Predictor, PROB_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QFunctionKind {
    TokenEntropy,
    HardLabelMatch,
    TokenCe,
}

impl QFunctionKind {
    pub const ALL: [QFunctionKind; 3] = [Self::TokenEntropy, Self::HardLabelMatch, Self::TokenCe];

    pub fn name(self) -> &'static str {
        match self {
            Self::TokenEntropy => "token_entropy",
            Self::HardLabelMatch => "hard_label_match",
            Self::TokenCe => "token_ce",
        }
    }
}

impl std::str::FromStr for QFunctionKind {
    type Err = CkdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CkdError::InvalidConfig(format!("unknown quantification function `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QScore {
    pub raw: f64,
    pub oriented: f64,
    pub kind: QFunctionKind,
    /// The gold probability fell below the floor.
    pub clamped: bool,
}

/// Non-negative entries summing to one within 1e-6.
pub fn check_distribution(dist: &[f64]) -> Result<()> {
    if dist.is_empty() {
        return Err(CkdError::InvalidDistribution("empty vector".into()));
    }
    if dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
        return Err(CkdError::InvalidDistribution("negative or non-finite entry".into()));
    }
    let s: f64 = dist.iter().sum();
    if (s - 1.0).abs() > 1e-6 {
        return Err(CkdError::InvalidDistribution(format!("sums to {s}")));
    }
    Ok(())
}

fn check_gold(dist: &[f64], gold: u32) -> Result<usize> {
    let g = gold as usize;
    if g >= dist.len() {
        return Err(CkdError::TokenOutOfRange { id: gold, size: dist.len() });
    }
    Ok(g)
}

/// `-Σ p ln p`; lower entropy is the better prediction.
pub fn q_token_entropy(dist: &[f64]) -> Result<QScore> {
    check_distribution(dist)?;
    let raw: f64 = dist.iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum();
    Ok(QScore { raw, oriented: -raw, kind: QFunctionKind::TokenEntropy, clamped: false })
}

/// 1 if the argmax (lowest id on ties) is the gold token.
pub fn q_hard_label_match(dist: &[f64], gold: u32) -> Result<QScore> {
    let g = check_gold(dist, gold)?;
    let hit = if argmax(dist) == g { 1.0 } else { 0.0 };
    Ok(QScore { raw: hit, oriented: hit, kind: QFunctionKind::HardLabelMatch, clamped: false })
}

/// Raw `-ln p(gold)`, oriented `p(gold)`.
pub fn q_token_ce(dist: &[f64], gold: u32) -> Result<QScore> {
    let g = check_gold(dist, gold)?;
    let p = dist[g];
    let clamped = p < PROB_FLOOR;
    let raw = -p.max(PROB_FLOOR).ln();
    Ok(QScore { raw, oriented: p, kind: QFunctionKind::TokenCe, clamped })
}

pub fn q_score(kind: QFunctionKind, dist: &[f64], gold: u32) -> Result<QScore> {
    match kind {
        QFunctionKind::TokenEntropy => {
            check_gold(dist, gold)?;
            q_token_entropy(dist)
        }
        QFunctionKind::HardLabelMatch => q_hard_label_match(dist, gold),
        QFunctionKind::TokenCe => q_token_ce(dist, gold),
    }
}

/// Sample Pearson correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(CkdError::LengthMismatch(format!("{} vs {} values", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(CkdError::UndefinedCorrelation("need at least two points".into()));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(CkdError::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyCell {
    pub model: String,
    pub testset: String,
    pub mean_raw_q: f64,
    pub mean_oriented_q: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationStudy {
    pub kind: QFunctionKind,
    pub cells: Vec<StudyCell>,
    /// Pearson r between mean raw Q and BLEU.
    pub r: f64,
    /// Pearson r between mean oriented Q and BLEU.
    pub r_oriented: f64,
}

impl CorrelationStudy {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,testset,mean_raw_Q,BLEU\n");
        for c in &self.cells {
            writeln!(out, "{},{},{},{}", c.model, c.testset, c.mean_raw_q, c.bleu).unwrap();
        }
        writeln!(out, "r,{},,", self.r).unwrap();
        out
    }
}

/// Mean raw and oriented Q of `model` over every target token of `corpus`.
pub fn mean_q(model: &dyn Predictor, corpus: &ParallelCorpus, kind: QFunctionKind) -> Result<(f64, f64)> {
    let d = corpus_distributions(model, &corpus.pairs, 64)?;
    let (mut raw, mut ori) = (0.0, 0.0);
    for (b, j) in d.positions() {
        let s = q_score(kind, d.row(b, j).expect("unmasked"), corpus.pairs[b].target[j])?;
        raw += s.raw;
        ori += s.oriented;
    }
    let n = d.num_rows() as f64;
    Ok((raw / n, ori / n))
}

/// Correlates mean Q with corpus BLEU over `(model, testset)` cells.
pub fn correlation_study(cells: &[(&Model, &ParallelCorpus)], kind: QFunctionKind) -> Result<CorrelationStudy> {
    if cells.len() < 2 {
        return Err(CkdError::UndefinedCorrelation("need at least two cells".into()));
    }
    let mut out = Vec::with_capacity(cells.len());
    for (i, (model, test)) in cells.iter().enumerate() {
        let (mean_raw_q, mean_oriented_q) = mean_q(*model, test, kind)?;
        let bleu = model_bleu(model, test)?.score;
        let name = model.meta.get("domain").cloned().unwrap_or_else(|| format!("model{i}"));
        log::info!(
            "correlate kind={} model={name} testset={} raw_q={mean_raw_q:.4} bleu={bleu:.2}",
            kind.name(),
            test.domain
        );
        out.push(StudyCell { model: name, testset: test.domain.clone(), mean_raw_q, mean_oriented_q, bleu });
    }
    let bleu: Vec<f64> = out.iter().map(|c| c.bleu).collect();
    let raw: Vec<f64> = out.iter().map(|c| c.mean_raw_q).collect();
    let ori: Vec<f64> = out.iter().map(|c| c.mean_oriented_q).collect();
    Ok(CorrelationStudy { kind, r: pearson(&raw, &bleu)?, r_oriented: pearson(&ori, &bleu)?, cells: out })
}
