//! Corpus BLEU, accumulative degradation, and the step-by-method report.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{CkdError, Result};
use crate::model::Model;

pub const HISTORY_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Tokenized 4-gram corpus BLEU without smoothing. Any zero n-gram precision
/// gives a score of 0.
pub fn corpus_bleu<T: Eq + Hash>(hypotheses: &[Vec<T>], references: &[Vec<T>]) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(CkdError::LengthMismatch(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(CkdError::Empty("no sentences to score"));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0, 0);
    for (hyp, reference) in hypotheses.iter().zip(references) {
        c += hyp.len();
        r += reference.len();
        for n in 1..=4 {
            let rc = ngram_counts(reference, n);
            for (gram, count) in ngram_counts(hyp, n) {
                matched[n - 1] += count.min(rc.get(gram).copied().unwrap_or(0));
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        precisions[n] = if total[n] == 0 { 0.0 } else { matched[n] as f64 / total[n] as f64 };
    }
    let brevity_penalty = if c == 0 {
        0.0
    } else if c < r {
        (1.0 - r as f64 / c as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().all(|p| *p > 0.0) {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0).exp()
    } else {
        0.0
    };
    Ok(BleuScore { score, precisions, brevity_penalty, hyp_len: c, ref_len: r })
}

/// Greedy translations of every source in `corpus`, scored against the
/// EOS-stripped references.
pub fn model_bleu(model: &Model, corpus: &ParallelCorpus) -> Result<BleuScore> {
    use rayon::prelude::*;
    let max_len = model.arch().max_len;
    let hyps: Vec<Vec<u32>> = corpus.pairs.par_iter().map(|p| model.greedy_decode(&p.source, max_len)).collect();
    let refs: Vec<Vec<u32>> = corpus.pairs.iter().map(|p| p.reference().to_vec()).collect();
    corpus_bleu(&hyps, &refs)
}

/// Sum of BLEU drops between consecutive steps.
pub fn accumulative_degradation(bleu: &[f64]) -> Result<f64> {
    if bleu.len() < 2 {
        return Err(CkdError::InvalidConfig("degradation needs step 0 and at least one more step".into()));
    }
    Ok(bleu.windows(2).map(|w| (w[0] - w[1]).max(0.0)).sum())
}

/// AD after each step, starting with 0 at step 0.
pub fn running_degradation(bleu: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(bleu.len());
    for (i, b) in bleu.iter().enumerate() {
        if i > 0 {
            acc += (bleu[i - 1] - b).max(0.0);
        }
        out.push(acc);
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub ce: f64,
    pub kf: f64,
    pub ki: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ewc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    /// Teacher distilled at this step; empty at step 0.
    #[serde(default)]
    pub teacher: String,
    pub bleu: f64,
    pub delta_bleu: f64,
    pub ad: f64,
    pub pos: usize,
    pub neg: usize,
    pub neg_active: usize,
    pub epochs: usize,
    pub losses: LossTrace,
}

/// Metrics of one method on one teacher order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub method: String,
    pub config: String,
    pub steps: Vec<StepMetrics>,
}

#[derive(Serialize, Deserialize)]
struct HistoryLine {
    schema_version: u32,
    method: String,
    config: String,
    #[serde(flatten)]
    metrics: StepMetrics,
}

impl RunHistory {
    pub fn new(method: impl Into<String>, config: impl Into<String>) -> Self {
        Self { method: method.into(), config: config.into(), steps: Vec::new() }
    }

    /// Appends a step, filling in ΔBLEU and AD from the BLEU values so far.
    pub fn push(&mut self, mut m: StepMetrics) {
        m.step = self.steps.len();
        let b0 = self.steps.first().map_or(m.bleu, |s| s.bleu);
        m.delta_bleu = m.bleu - b0;
        m.ad = match self.steps.last() {
            Some(prev) => prev.ad + (prev.bleu - m.bleu).max(0.0),
            None => 0.0,
        };
        self.steps.push(m);
    }

    pub fn bleu(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.bleu).collect()
    }

    pub fn final_ad(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.ad)
    }

    pub fn final_delta(&self) -> f64 {
        self.steps.last().map_or(0.0, |s| s.delta_bleu)
    }

    /// One JSON object per line.
    pub fn jsonl_line(&self, step: usize) -> Result<String> {
        let line = HistoryLine {
            schema_version: HISTORY_SCHEMA_VERSION,
            method: self.method.clone(),
            config: self.config.clone(),
            metrics: self.steps[step].clone(),
        };
        Ok(serde_json::to_string(&line)?)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for i in 0..self.steps.len() {
            out.push_str(&self.jsonl_line(i)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Parses a history file; a file may hold several runs.
    pub fn from_jsonl(text: &str) -> Result<Vec<RunHistory>> {
        let mut runs: Vec<RunHistory> = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let value: serde_json::Value = serde_json::from_str(line)?;
            let found = value.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
            if found != HISTORY_SCHEMA_VERSION {
                return Err(CkdError::Schema { expected: HISTORY_SCHEMA_VERSION, found });
            }
            let h: HistoryLine = serde_json::from_value(value)?;
            match runs.last_mut() {
                Some(r) if r.method == h.method && r.config == h.config && h.metrics.step == r.steps.len() => {
                    r.steps.push(h.metrics)
                }
                _ => {
                    if h.metrics.step != 0 {
                        return Err(CkdError::Format(format!(
                            "history for {} {} starts at step {}",
                            h.method, h.config, h.metrics.step
                        )));
                    }
                    runs.push(RunHistory { method: h.method, config: h.config, steps: vec![h.metrics] });
                }
            }
        }
        Ok(runs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub table: String,
    pub csv: String,
}

/// One CSV row as written by [`render_report`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub config: String,
    pub step: usize,
    pub bleu: f64,
    pub delta_bleu: f64,
    pub ad: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cell(bleu: f64, delta: f64) -> String {
    format!("{bleu:.2}({delta:+.2})")
}

/// Renders runs as a step-by-method table (configurations as column pairs,
/// plus row-wise averages) and as CSV.
pub fn render_report(runs: &[RunHistory]) -> Result<Report> {
    if runs.is_empty() {
        return Err(CkdError::Empty("no histories to report"));
    }
    let mut methods: Vec<&str> = Vec::new();
    let mut configs: Vec<&str> = Vec::new();
    let mut by_key: BTreeMap<(&str, &str), &RunHistory> = BTreeMap::new();
    for r in runs {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !configs.contains(&r.config.as_str()) {
            configs.push(&r.config);
        }
        by_key.insert((r.method.as_str(), r.config.as_str()), r);
    }
    let max_step = runs.iter().map(|r| r.steps.len()).max().unwrap_or(0);

    let mut csv = String::from("method,config,step,bleu,delta_bleu,ad\n");
    for r in runs {
        for s in &r.steps {
            writeln!(csv, "{},{},{},{},{},{}", r.method, r.config, s.step, s.bleu, s.delta_bleu, s.ad).unwrap();
        }
    }

    let width = 16;
    let mut table = String::new();
    write!(table, "{:<5} {:<14}", "Step", "Method").unwrap();
    for c in configs.iter().map(|c| c.to_string()).chain(["Average".to_string()]) {
        write!(table, " {:>w$} {:>6}", format!("{c} BLEU"), "AD", w = width).unwrap();
    }
    table.push('\n');

    // Step 0 is shared by all methods of a configuration.
    let mut step0 = Vec::new();
    write!(table, "{:<5} {:<14}", 0, "").unwrap();
    for c in &configs {
        let b = methods
            .iter()
            .find_map(|m| by_key.get(&(*m, *c)).and_then(|r| r.steps.first()))
            .map(|s| s.bleu);
        match b {
            Some(b) => {
                step0.push(b);
                write!(table, " {:>w$.2} {:>6}", b, "", w = width).unwrap();
            }
            None => write!(table, " {:>w$} {:>6}", "-", "", w = width).unwrap(),
        }
    }
    if !step0.is_empty() {
        write!(table, " {:>w$.2} {:>6}", mean(&step0), "", w = width).unwrap();
    }
    table.push('\n');

    for step in 1..max_step {
        for m in &methods {
            let mut bleus = Vec::new();
            let mut deltas = Vec::new();
            let mut ads = Vec::new();
            write!(table, "{:<5} {:<14}", step, m).unwrap();
            for c in &configs {
                match by_key.get(&(*m, *c)).and_then(|r| r.steps.get(step)) {
                    Some(s) => {
                        bleus.push(s.bleu);
                        deltas.push(s.delta_bleu);
                        ads.push(s.ad);
                        write!(table, " {:>w$} {:>6.2}", cell(s.bleu, s.delta_bleu), s.ad, w = width).unwrap();
                    }
                    None => write!(table, " {:>w$} {:>6}", "-", "-", w = width).unwrap(),
                }
            }
            if bleus.is_empty() {
                write!(table, " {:>w$} {:>6}", "-", "-", w = width).unwrap();
            } else {
                write!(table, " {:>w$} {:>6.2}", cell(mean(&bleus), mean(&deltas)), mean(&ads), w = width).unwrap();
            }
            table.push('\n');
        }
    }
    Ok(Report { table, csv })
}

/// Parses the CSV written by [`render_report`].
pub fn parse_report_csv(csv: &str) -> Result<Vec<ReportRow>> {
    let mut lines = csv.lines();
    match lines.next() {
        Some("method,config,step,bleu,delta_bleu,ad") => {}
        _ => return Err(CkdError::Format("unexpected report header".into())),
    }
    let bad = |l: &str| CkdError::Format(format!("bad report row: {l}"));
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 6 {
                return Err(bad(l));
            }
            Ok(ReportRow {
                method: f[0].to_string(),
                config: f[1].to_string(),
                step: f[2].parse().map_err(|_| bad(l))?,
                bleu: f[3].parse().map_err(|_| bad(l))?,
                delta_bleu: f[4].parse().map_err(|_| bad(l))?,
                ad: f[5].parse().map_err(|_| bad(l))?,
            })
        })
        .collect()
}
