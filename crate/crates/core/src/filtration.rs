//! Knowledge filtration: split transfer tuples by comparing teacher and
//! student, distill the positives, and push the student away from the
//! teacher on the negatives until their divergence reaches a margin.

use std::collections::HashMap;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{SentencePair, TransferTuple};
use crate::error::{CkdError, Result};
use crate::model::engine::Objective;
use crate::model::{argmax, evaluate, DistributionBatch, LossValue, Model, Predictor, RowGrads, PROB_FLOOR};
use crate::quantify::{check_distribution, q_score, QFunctionKind};
use crate::seed::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceKind {
    #[default]
    Kl,
    InverseKl,
}

/// How a negative tuple's divergence `d` becomes a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegForm {
    /// `max(0, α − d)`: active while the student is still close to the teacher.
    #[default]
    Hinge,
    /// `min(0, α − d)`: the formula taken literally, active only once `d > α`.
    LiteralMin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FiltrationPolicy {
    Trivial,
    HardLabelMatching,
    HardLabelMatchingWithFiltration,
    TokenCe,
    #[default]
    TokenCeWithFiltration,
    Hybrid1,
    Hybrid2,
    Hybrid3,
}

impl FiltrationPolicy {
    pub const ALL: [FiltrationPolicy; 8] = [
        Self::Trivial,
        Self::HardLabelMatching,
        Self::HardLabelMatchingWithFiltration,
        Self::TokenCe,
        Self::TokenCeWithFiltration,
        Self::Hybrid1,
        Self::Hybrid2,
        Self::Hybrid3,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Trivial => "trivial",
            Self::HardLabelMatching => "hard_label_matching",
            Self::HardLabelMatchingWithFiltration => "hard_label_matching_with_filtration",
            Self::TokenCe => "token_ce",
            Self::TokenCeWithFiltration => "token_ce_with_filtration",
            Self::Hybrid1 => "hybrid_1",
            Self::Hybrid2 => "hybrid_2",
            Self::Hybrid3 => "hybrid_3",
        }
    }
}

impl FromStr for FiltrationPolicy {
    type Err = CkdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| CkdError::InvalidConfig(format!("unknown filtration policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    None,
    Uniform,
    Normal,
    ShuffledBatchAttached,
    ShuffledBatchDetached,
}

/// Replacement for the teacher distribution inside the negative term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSource {
    pub kind: NoiseKind,
    pub sample_size: usize,
}

impl Default for NoiseSource {
    fn default() -> Self {
        Self { kind: NoiseKind::None, sample_size: 1 }
    }
}

impl NoiseSource {
    pub fn is_none(&self) -> bool {
        self.kind == NoiseKind::None
    }
}

/// Positive and negative weight of one target position. Both zero means the
/// position is discarded (or not part of the tuple set).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RowWeights {
    pub pos: f64,
    pub neg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RowAction {
    Positive,
    Negative,
    Discarded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiltrationSplit {
    pub positive: Vec<TransferTuple>,
    pub negative: Vec<TransferTuple>,
    pub q_kind: QFunctionKind,
}

/// Divergence between valid distributions. `kl` is `Σ p ln(p/q)`,
/// `inverse_kl` is `Σ q ln(q/p)`; probabilities are floored before logs.
pub fn divergence(p: &[f64], q: &[f64], kind: DivergenceKind) -> Result<f64> {
    check_distribution(p)?;
    check_distribution(q)?;
    if p.len() != q.len() {
        return Err(CkdError::InvalidDistribution(format!("lengths {} and {}", p.len(), q.len())));
    }
    Ok(row_divergence(p, q, kind, None, None).0)
}

fn kl_term(r: &[f64], s: &[f64], mut ds: Option<&mut [f64]>, mut dr: Option<&mut [f64]>, w: f64) -> (f64, usize) {
    let mut v = 0.0;
    let mut clamped = 0;
    for k in 0..r.len() {
        let sc = if s[k] < PROB_FLOOR {
            clamped += (r[k] > 0.0) as usize;
            PROB_FLOOR
        } else {
            s[k]
        };
        if r[k] > 0.0 {
            v += r[k] * (r[k].ln() - sc.ln());
        }
        if let Some(ds) = ds.as_deref_mut() {
            if s[k] >= PROB_FLOOR {
                ds[k] += w * -r[k] / s[k];
            }
        }
        if let Some(dr) = dr.as_deref_mut() {
            dr[k] += w * (r[k].max(PROB_FLOOR).ln() - sc.ln() + 1.0);
        }
    }
    (v, clamped)
}

/// Divergence of the student row `s` from the reference row `r` under
/// `kind`, accumulating `w · ∂/∂s` and `w · ∂/∂r` into the given buffers.
fn row_divergence(
    r: &[f64],
    s: &[f64],
    kind: DivergenceKind,
    ds: Option<(&mut [f64], f64)>,
    dr: Option<(&mut [f64], f64)>,
) -> (f64, usize) {
    let (ds, ws) = match ds {
        Some((b, w)) => (Some(b), w),
        None => (None, 0.0),
    };
    let (dr, wr) = match dr {
        Some((b, w)) => (Some(b), w),
        None => (None, 0.0),
    };
    let w = if ds.is_some() { ws } else { wr };
    match kind {
        DivergenceKind::Kl => kl_term(r, s, ds, dr, w),
        DivergenceKind::InverseKl => kl_term(s, r, dr, ds, w),
    }
}

fn hinge(alpha: f64, d: f64, form: NegForm) -> (f64, bool) {
    match form {
        NegForm::Hinge if d < alpha => (alpha - d, true),
        NegForm::LiteralMin if d > alpha => (alpha - d, true),
        _ => (0.0, false),
    }
}

/// Contribution of one negative tuple with teacher-student divergence `d`.
pub fn neg_contribution(alpha: f64, d: f64, form: NegForm) -> f64 {
    hinge(alpha, d, form).0
}

/// Oriented-Q comparison; ties go to the negative side.
pub fn teacher_is_better(kind: QFunctionKind, teacher: &[f64], student: &[f64], gold: u32) -> Result<bool> {
    Ok(q_score(kind, teacher, gold)?.oriented > q_score(kind, student, gold)?.oriented)
}

/// Action for one tuple under `policy`. `q_kind` is the function behind ΔQ
/// (teacher minus student, oriented).
pub fn decide(
    policy: FiltrationPolicy,
    q_kind: QFunctionKind,
    teacher: &[f64],
    student: &[f64],
    gold: u32,
) -> Result<RowAction> {
    use FiltrationPolicy as P;
    use RowAction::{Discarded as D, Negative as N, Positive as Pos};
    let better = teacher_is_better(q_kind, teacher, student, gold)?;
    let by_q = |otherwise: RowAction| if better { Pos } else { otherwise };
    let s_ok = argmax(student) == gold as usize;
    let t_ok = argmax(teacher) == gold as usize;
    // Cells: both correct, both wrong, only student correct, only teacher correct.
    let action = match (policy, s_ok, t_ok) {
        (P::Trivial, _, _) => Pos,
        (P::TokenCeWithFiltration, _, _) => by_q(N),
        (P::HardLabelMatching, s, t) => if !s && t { Pos } else { D },
        (P::HardLabelMatchingWithFiltration, s, t) => match (s, t) {
            (true, false) => N,
            (false, true) => Pos,
            _ => D,
        },
        (_, true, false) => match policy {
            P::TokenCe => D,
            _ => N,
        },
        (_, false, true) => Pos,
        (P::TokenCe, _, _) => by_q(D),
        (P::Hybrid1, true, true) => by_q(N),
        (P::Hybrid1, false, false) => by_q(D),
        (P::Hybrid2, true, true) => by_q(D),
        (P::Hybrid2, false, false) => by_q(N),
        (P::Hybrid3, true, true) => if better { D } else { N },
        (P::Hybrid3, false, false) => by_q(N),
    };
    Ok(action)
}

/// Tuples regrouped into teacher-forced sentences: a tuple `(n, j)` is row
/// `j − 1` of a sentence whose target extends its prefix.
#[derive(Debug, Clone)]
pub struct TupleLayout {
    pub pairs: Vec<SentencePair>,
    /// `(sentence, row)` of every input tuple, in input order.
    pub rows: Vec<(usize, usize)>,
}

impl TupleLayout {
    pub fn new(tuples: &[TransferTuple]) -> Self {
        let mut pairs: Vec<SentencePair> = Vec::new();
        let mut by_origin: HashMap<usize, Vec<usize>> = HashMap::new();
        let mut rows = Vec::with_capacity(tuples.len());
        for t in tuples {
            let mut path = t.prefix.clone();
            path.push(t.target_token);
            let candidates = by_origin.entry(t.origin.0).or_default();
            let mut slot = None;
            for &g in candidates.iter() {
                let p = &mut pairs[g];
                if p.source != t.source {
                    continue;
                }
                let common = p.target.len().min(path.len());
                if p.target[..common] == path[..common] {
                    if path.len() > p.target.len() {
                        p.target = path.clone();
                    }
                    slot = Some(g);
                    break;
                }
            }
            let g = slot.unwrap_or_else(|| {
                pairs.push(SentencePair { source: t.source.clone(), target: path.clone() });
                candidates.push(pairs.len() - 1);
                pairs.len() - 1
            });
            rows.push((g, t.prefix.len()));
        }
        Self { pairs, rows }
    }

    fn empty_plan(&self) -> Vec<Vec<RowWeights>> {
        self.pairs.iter().map(|p| vec![RowWeights::default(); p.target.len()]).collect()
    }

    /// Plan with weight `w` added to the positive (or negative) side of every
    /// listed tuple. Repeated tuples count repeatedly.
    pub fn plan(&self, tuple_ids: impl IntoIterator<Item = usize>, w: f64, negative: bool) -> Vec<Vec<RowWeights>> {
        let mut plan = self.empty_plan();
        for i in tuple_ids {
            let (g, j) = self.rows[i];
            if negative {
                plan[g][j].neg += w;
            } else {
                plan[g][j].pos += w;
            }
        }
        plan
    }
}

/// Weighted positive/negative distillation against fixed reference rows.
///
/// Positive rows add `pos · D(ref ‖ student)`; negative rows add
/// `neg · max(0, α − D)` (or the literal min form), with the reference
/// optionally replaced by noise.
pub struct DistillObjective<'a> {
    /// Reference distributions indexed by corpus sentence.
    pub reference: &'a DistributionBatch,
    pub plan: &'a [Vec<RowWeights>],
    pub alpha: f64,
    pub kind: DivergenceKind,
    pub neg_form: NegForm,
    pub noise: NoiseSource,
    pub noise_seed: u64,
}

impl<'a> DistillObjective<'a> {
    pub fn positive(reference: &'a DistributionBatch, plan: &'a [Vec<RowWeights>], kind: DivergenceKind) -> Self {
        Self {
            reference,
            plan,
            alpha: 1.0,
            kind,
            neg_form: NegForm::Hinge,
            noise: NoiseSource::default(),
            noise_seed: 0,
        }
    }
}

fn noise_rng(seed: u64, ids: &[usize]) -> Rng {
    let label: String = ids.iter().map(|i| format!("{i},")).collect();
    rng_for(seed, &label)
}

impl Objective for DistillObjective<'_> {
    fn eval(&self, ids: &[usize], seqs: &[SentencePair], student: &DistributionBatch, want_grad: bool)
        -> Result<RowGrads> {
        let v = student.vocab_size();
        if self.reference.vocab_size() != v {
            return Err(CkdError::VocabMismatch("reference and student distributions differ in size".into()));
        }
        let lengths: Vec<usize> = seqs.iter().map(|p| p.target.len()).collect();
        let mut dprobs = want_grad.then(|| DistributionBatch::zeros(v, lengths));
        let mut value = 0.0;
        let mut clamped = 0;
        let needs_noise = !self.noise.is_none() && ids.iter().any(|&n| self.plan[n].iter().any(|w| w.neg != 0.0));
        let draws = if needs_noise {
            let mut rng = noise_rng(self.noise_seed, ids);
            Some(sample_noise_distribution(self.noise, student, &mut rng)?)
        } else {
            None
        };
        let mut draw_iter = draws.iter().flatten();
        let mut ds = vec![0.0; v];
        let mut dr = vec![0.0; v];
        for (b, j) in student.positions() {
            let n = ids[b];
            let w = self.plan[n][j];
            let s = student.row(b, j).expect("unmasked");
            let row_draws = draws.as_ref().map(|_| draw_iter.next().expect("one draw per row"));
            if w.pos == 0.0 && w.neg == 0.0 {
                continue;
            }
            let r = self
                .reference
                .row(n, j)
                .ok_or_else(|| CkdError::LengthMismatch(format!("no reference row for ({n}, {j})")))?;
            ds.fill(0.0);
            if w.pos != 0.0 {
                let (d, c) = row_divergence(r, s, self.kind, want_grad.then_some((&mut ds[..], w.pos)), None);
                value += w.pos * d;
                clamped += c;
            }
            if w.neg != 0.0 {
                match row_draws {
                    None => {
                        let (d, c) = row_divergence(r, s, self.kind, None, None);
                        clamped += c;
                        let (h, active) = hinge(self.alpha, d, self.neg_form);
                        value += w.neg * h;
                        if active && want_grad {
                            row_divergence(r, s, self.kind, Some((&mut ds[..], -w.neg)), None);
                        }
                    }
                    Some(samples) => {
                        let k = samples.len() as f64;
                        for sample in samples {
                            let (d, c) = row_divergence(&sample.dist, s, self.kind, None, None);
                            clamped += c;
                            let (h, active) = hinge(self.alpha, d, self.neg_form);
                            value += w.neg * h / k;
                            if active && want_grad {
                                let wt = -w.neg / k;
                                match (sample.from, self.noise.kind) {
                                    (Some((bb, jj)), NoiseKind::ShuffledBatchAttached) => {
                                        dr.fill(0.0);
                                        row_divergence(&sample.dist, s, self.kind, Some((&mut ds[..], wt)), None);
                                        row_divergence(&sample.dist, s, self.kind, None, Some((&mut dr[..], wt)));
                                        let dp = dprobs.as_mut().expect("gradient buffer");
                                        for (a, g) in dp.row_mut(bb, jj).iter_mut().zip(&dr) {
                                            *a += g;
                                        }
                                    }
                                    _ => {
                                        row_divergence(&sample.dist, s, self.kind, Some((&mut ds[..], wt)), None);
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dp) = dprobs.as_mut() {
                for (a, g) in dp.row_mut(b, j).iter_mut().zip(&ds) {
                    *a += g;
                }
            }
        }
        Ok(RowGrads { value, dprobs, clamped })
    }
}

/// One noise distribution standing in for a teacher row.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub dist: Vec<f64>,
    /// Source position for shuffled-batch draws.
    pub from: Option<(usize, usize)>,
}

/// `sample_size` draws for every unmasked row of `batch`, in position order.
pub fn sample_noise_distribution(
    source: NoiseSource,
    batch: &DistributionBatch,
    rng: &mut Rng,
) -> Result<Vec<Vec<NoiseDraw>>> {
    if source.sample_size == 0 {
        return Err(CkdError::InvalidConfig("noise sample size must be >= 1".into()));
    }
    let positions: Vec<(usize, usize)> = batch.positions().collect();
    let v = batch.vocab_size();
    let mut out = Vec::with_capacity(positions.len());
    for (i, _) in positions.iter().enumerate() {
        let mut draws = Vec::with_capacity(source.sample_size);
        for _ in 0..source.sample_size {
            let draw = match source.kind {
                NoiseKind::None => return Err(CkdError::InvalidConfig("no noise source configured".into())),
                NoiseKind::Uniform => {
                    let raw: Vec<f64> = (0..v).map(|_| rng.random::<f64>()).collect();
                    NoiseDraw { dist: crate::autograd::softmax(&raw), from: None }
                }
                NoiseKind::Normal => {
                    let raw: Vec<f64> = (0..v).map(|_| StandardNormal.sample(rng)).collect();
                    NoiseDraw { dist: crate::autograd::softmax(&raw), from: None }
                }
                NoiseKind::ShuffledBatchAttached | NoiseKind::ShuffledBatchDetached => {
                    if positions.len() < 2 {
                        return Err(CkdError::InvalidConfig("shuffled-batch noise needs at least two positions".into()));
                    }
                    let mut k = rng.random_range(0..positions.len() - 1);
                    if k >= i {
                        k += 1;
                    }
                    let (b, j) = positions[k];
                    NoiseDraw { dist: batch.row(b, j).expect("unmasked").to_vec(), from: Some((b, j)) }
                }
            };
            draws.push(draw);
        }
        out.push(draws);
    }
    Ok(out)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha.is_finite() {
        Ok(())
    } else {
        Err(CkdError::InvalidConfig(format!("alpha must be > 0, got {alpha}")))
    }
}

fn check_teacher(teacher: &dyn Predictor, student: &Model) -> Result<()> {
    if !teacher.is_frozen() {
        return Err(CkdError::InvalidConfig("teacher must be frozen".into()));
    }
    student.check_compatible(teacher)
}

/// Reference distributions for every sentence of a layout.
fn reference_dists(teacher: &dyn Predictor, layout: &TupleLayout) -> Result<DistributionBatch> {
    crate::model::corpus_distributions(teacher, &layout.pairs, 64)
}

fn eval_plan(
    student: &Model,
    layout: &TupleLayout,
    reference: &DistributionBatch,
    plan: &[Vec<RowWeights>],
    alpha: f64,
    kind: DivergenceKind,
) -> Result<LossValue> {
    let obj = DistillObjective {
        reference,
        plan,
        alpha,
        kind,
        neg_form: NegForm::Hinge,
        noise: NoiseSource::default(),
        noise_seed: 0,
    };
    let ids: Vec<usize> = (0..layout.pairs.len()).collect();
    evaluate(student, &layout.pairs, &ids, &obj, true, None)
}

fn empty_loss(student: &Model) -> LossValue {
    LossValue { value: 0.0, grad: (!student.is_frozen()).then(|| vec![0.0; student.param_count()]), clamped: 0 }
}

/// Partition of `tuples` by oriented-Q comparison against the current
/// student.
pub fn split_transfer(
    teacher: &dyn Predictor,
    student: &Model,
    tuples: &[TransferTuple],
    q_kind: QFunctionKind,
) -> Result<FiltrationSplit> {
    student.check_compatible(teacher)?;
    let mut split = FiltrationSplit { positive: Vec::new(), negative: Vec::new(), q_kind };
    if tuples.is_empty() {
        return Ok(split);
    }
    let layout = TupleLayout::new(tuples);
    let t = reference_dists(teacher, &layout)?;
    let s = student.forward_distributions(&layout.pairs)?;
    for (tuple, &(g, j)) in tuples.iter().zip(&layout.rows) {
        let gold = tuple.target_token;
        if teacher_is_better(q_kind, t.row(g, j).expect("row"), s.row(g, j).expect("row"), gold)? {
            split.positive.push(tuple.clone());
        } else {
            split.negative.push(tuple.clone());
        }
    }
    Ok(split)
}

/// `Σ D(teacher ‖ student)` over `tuples`.
pub fn kd_loss(teacher: &dyn Predictor, student: &Model, tuples: &[TransferTuple], kind: DivergenceKind) -> Result<LossValue> {
    check_teacher(teacher, student)?;
    if tuples.is_empty() {
        return Ok(empty_loss(student));
    }
    let layout = TupleLayout::new(tuples);
    let reference = reference_dists(teacher, &layout)?;
    let plan = layout.plan(0..tuples.len(), 1.0, false);
    eval_plan(student, &layout, &reference, &plan, 1.0, kind)
}

/// `Σ max(0, α − KL(teacher ‖ student))` over `negatives`.
pub fn neg_kd_loss(teacher: &dyn Predictor, student: &Model, negatives: &[TransferTuple], alpha: f64) -> Result<LossValue> {
    check_alpha(alpha)?;
    check_teacher(teacher, student)?;
    if negatives.is_empty() {
        return Ok(empty_loss(student));
    }
    let layout = TupleLayout::new(negatives);
    let reference = reference_dists(teacher, &layout)?;
    let plan = layout.plan(0..negatives.len(), 1.0, true);
    eval_plan(student, &layout, &reference, &plan, alpha, DivergenceKind::Kl)
}

/// `k_a · KD(positive) + k_b · NEG(negative)`.
pub fn kf_loss(
    teacher: &dyn Predictor,
    student: &Model,
    split: &FiltrationSplit,
    alpha: f64,
    k_a: f64,
    k_b: f64,
    kind: DivergenceKind,
) -> Result<LossValue> {
    check_alpha(alpha)?;
    check_teacher(teacher, student)?;
    if !(k_a >= 0.0 && k_b >= 0.0) {
        return Err(CkdError::InvalidConfig(format!("loss weights must be >= 0, got {k_a}, {k_b}")));
    }
    let all: Vec<TransferTuple> = split.positive.iter().chain(&split.negative).cloned().collect();
    if all.is_empty() {
        return Ok(empty_loss(student));
    }
    let layout = TupleLayout::new(&all);
    let reference = reference_dists(teacher, &layout)?;
    let np = split.positive.len();
    let mut plan = layout.plan(0..np, k_a, false);
    for i in np..all.len() {
        let (g, j) = layout.rows[i];
        plan[g][j].neg += k_b;
    }
    eval_plan(student, &layout, &reference, &plan, alpha, kind)
}

/// Row weights for `policy` given reference and student distributions over
/// the same sentences.
pub fn policy_plan(
    policy: FiltrationPolicy,
    q_kind: QFunctionKind,
    teacher: &DistributionBatch,
    student: &DistributionBatch,
    seqs: &[SentencePair],
    k_a: f64,
    k_b: f64,
) -> Result<Vec<Vec<RowWeights>>> {
    let mut plan: Vec<Vec<RowWeights>> = seqs.iter().map(|p| vec![RowWeights::default(); p.target.len()]).collect();
    for (b, j) in student.positions() {
        let t = teacher.row(b, j).ok_or_else(|| CkdError::LengthMismatch(format!("no teacher row ({b}, {j})")))?;
        let s = student.row(b, j).expect("unmasked");
        match decide(policy, q_kind, t, s, seqs[b].target[j])? {
            RowAction::Positive => plan[b][j].pos = k_a,
            RowAction::Negative => plan[b][j].neg = k_b,
            RowAction::Discarded => {}
        }
    }
    Ok(plan)
}

/// Filtration loss with per-tuple actions chosen by `policy` (ΔQ on oriented
/// token-level CE, unit weights, default margin form).
pub fn apply_filtration_policy(
    policy: FiltrationPolicy,
    teacher: &dyn Predictor,
    student: &Model,
    tuples: &[TransferTuple],
    alpha: f64,
) -> Result<LossValue> {
    check_alpha(alpha)?;
    check_teacher(teacher, student)?;
    if tuples.is_empty() {
        return Ok(empty_loss(student));
    }
    let layout = TupleLayout::new(tuples);
    let t = reference_dists(teacher, &layout)?;
    let s = student.forward_distributions(&layout.pairs)?;
    let mut plan: Vec<Vec<RowWeights>> = layout.plan(std::iter::empty(), 0.0, false);
    for (tuple, &(g, j)) in tuples.iter().zip(&layout.rows) {
        let action = decide(
            policy,
            QFunctionKind::TokenCe,
            t.row(g, j).expect("row"),
            s.row(g, j).expect("row"),
            tuple.target_token,
        )?;
        match action {
            RowAction::Positive => plan[g][j].pos += 1.0,
            RowAction::Negative => plan[g][j].neg += 1.0,
            RowAction::Discarded => {}
        }
    }
    eval_plan(student, &layout, &t, &plan, alpha, DivergenceKind::Kl)
}

#[cfg(test)]
mod tests;
