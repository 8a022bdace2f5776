//! The continual loop: one distillation step per arriving teacher, plus the
//! baselines it is compared against and the malicious-teacher wrapper.

use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{ParallelCorpus, SentencePair};
use crate::error::{CkdError, Result};
use crate::eval::{model_bleu, LossTrace, RunHistory, StepMetrics};
use crate::filtration::{
    divergence, policy_plan, DistillObjective, DivergenceKind, FiltrationPolicy, NegForm, NoiseSource, RowWeights,
};
use crate::inheritance::InheritanceAnchor;
use crate::model::engine::{fisher_diagonal, CrossEntropy, Objective, Weighted};
use crate::model::{
    corpus_distributions, evaluate, train_step, Adam, DistributionBatch, LossValue, Model, OptimizerConfig, Predictor,
};
use crate::quantify::QFunctionKind;
use crate::seed::{derive_seed, rng_for, sha256_hex};

const LAMBDA_CAP: f64 = 0.999;

/// Weight of the filtration term at step `t`; inheritance gets `1 − λ`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum LambdaSchedule {
    /// `0.999 (1 − 0.999^{t−1}) / (1 − 0.999^t)`, with `λ_1 = 0.999`.
    #[default]
    ClosedForm,
    /// The same closed form at every step, so `λ_1 = 0`.
    ClosedFormLiteral,
    Constant(f64),
    /// `λ_t` is entry `t − 1`.
    Custom(Vec<f64>),
}

fn closed_form(t: usize) -> f64 {
    let t = t as f64;
    LAMBDA_CAP * (1.0 - LAMBDA_CAP.powf(t - 1.0)) / (1.0 - LAMBDA_CAP.powf(t))
}

pub fn lambda_schedule(t: usize, schedule: &LambdaSchedule) -> Result<f64> {
    if t < 1 {
        return Err(CkdError::InvalidConfig("steps are numbered from 1".into()));
    }
    let v = match schedule {
        LambdaSchedule::ClosedForm if t == 1 => LAMBDA_CAP,
        LambdaSchedule::ClosedForm | LambdaSchedule::ClosedFormLiteral => closed_form(t),
        LambdaSchedule::Constant(c) => *c,
        LambdaSchedule::Custom(table) => *table
            .get(t - 1)
            .ok_or_else(|| CkdError::InvalidConfig(format!("no lambda for step {t} in a {}-entry table", table.len())))?,
    };
    if !(0.0..=1.0).contains(&v) {
        return Err(CkdError::InvalidConfig(format!("lambda {v} outside [0, 1]")));
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRefresh {
    /// Recompute the positive/negative split against the current student at
    /// every epoch boundary.
    #[default]
    Epoch,
    /// Split once at the start of the step.
    Step,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub q_kind: QFunctionKind,
    pub policy: FiltrationPolicy,
    pub divergence: DivergenceKind,
    pub neg_form: NegForm,
    pub noise: NoiseSource,
    pub k_a: f64,
    pub k_b: f64,
    pub lambda: LambdaSchedule,
    pub ce_weight: f64,
    pub epochs: usize,
    /// Epochs without a dev CE improvement before the step stops.
    pub patience: usize,
    /// Sentences per update.
    pub batch_size: usize,
    /// Sentences per teacher forward call.
    pub teacher_batch: usize,
    pub split_refresh: SplitRefresh,
    pub optimizer: OptimizerConfig,
    pub ewc_c: f64,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            q_kind: QFunctionKind::TokenCe,
            policy: FiltrationPolicy::TokenCeWithFiltration,
            divergence: DivergenceKind::Kl,
            neg_form: NegForm::Hinge,
            noise: NoiseSource::default(),
            k_a: 1.0,
            k_b: 1.0,
            lambda: LambdaSchedule::ClosedForm,
            ce_weight: 1.0,
            epochs: 30,
            patience: 3,
            batch_size: 32,
            teacher_batch: 64,
            split_refresh: SplitRefresh::Epoch,
            optimizer: OptimizerConfig::default(),
            ewc_c: 1.0,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CkdError::InvalidConfig(m));
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("alpha must be > 0, got {}", self.alpha));
        }
        if !(self.k_a >= 0.0 && self.k_b >= 0.0 && self.ce_weight >= 0.0 && self.ewc_c >= 0.0) {
            return bad("loss weights must be >= 0".into());
        }
        if self.batch_size == 0 || self.teacher_batch == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if self.noise.sample_size == 0 {
            return bad("noise sample size must be >= 1".into());
        }
        match &self.lambda {
            LambdaSchedule::Constant(c) if !(0.0..=1.0).contains(c) => return bad(format!("lambda {c} outside [0, 1]")),
            LambdaSchedule::Custom(t) if t.iter().any(|c| !(0.0..=1.0).contains(c)) => {
                return bad("custom lambda values must lie in [0, 1]".into())
            }
            _ => {}
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ckd,
    Kd,
    Ewc,
    MultiTeacher,
}

impl Method {
    pub const ALL: [Method; 4] = [Self::Ckd, Self::Kd, Self::Ewc, Self::MultiTeacher];

    pub fn name(self) -> &'static str {
        match self {
            Self::Ckd => "ckd",
            Self::Kd => "kd",
            Self::Ewc => "ewc",
            Self::MultiTeacher => "multi_teacher",
        }
    }
}

impl FromStr for Method {
    type Err = CkdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| CkdError::InvalidConfig(format!("unknown method `{s}`")))
    }
}

/// How the malicious wrapper reorders rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Permutation {
    /// A seeded single-cycle permutation: no row stays in place.
    Cycle,
    Identity,
}

/// A teacher whose rows are shuffled across the unmasked positions of every
/// batch it is asked about.
pub struct MaliciousTeacher<'a> {
    inner: &'a dyn Predictor,
    seed: u64,
    permutation: Permutation,
}

pub fn make_malicious(teacher: &dyn Predictor, seed: u64) -> Result<MaliciousTeacher<'_>> {
    MaliciousTeacher::new(teacher, seed, Permutation::Cycle)
}

impl<'a> MaliciousTeacher<'a> {
    pub fn new(teacher: &'a dyn Predictor, seed: u64, permutation: Permutation) -> Result<Self> {
        if !teacher.is_frozen() {
            return Err(CkdError::InvalidConfig("only frozen teachers can be wrapped".into()));
        }
        Ok(Self { inner: teacher, seed, permutation })
    }

    /// Source row of every output row, in position order.
    fn permutation_for(&self, batch: &[SentencePair], rows: usize) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..rows).collect();
        if self.permutation == Permutation::Identity {
            return perm;
        }
        let mut bytes = Vec::new();
        for p in batch {
            for t in p.source.iter().chain([&u32::MAX]).chain(&p.target).chain([&u32::MAX]) {
                bytes.extend_from_slice(&t.to_le_bytes());
            }
        }
        let mut rng = rng_for(self.seed, &format!("malicious/{}", sha256_hex(&bytes)));
        for i in (1..rows).rev() {
            let j = rng.random_range(0..i);
            perm.swap(i, j);
        }
        perm
    }
}

impl Predictor for MaliciousTeacher<'_> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn vocab_hash(&self) -> &str {
        self.inner.vocab_hash()
    }

    fn is_frozen(&self) -> bool {
        true
    }

    fn forward_distributions(&self, batch: &[SentencePair]) -> Result<DistributionBatch> {
        let clean = self.inner.forward_distributions(batch)?;
        let positions: Vec<(usize, usize)> = clean.positions().collect();
        let perm = self.permutation_for(batch, positions.len());
        let mut out = clean.clone();
        for (k, &(b, j)) in positions.iter().enumerate() {
            let (sb, sj) = positions[perm[k]];
            out.row_mut(b, j).copy_from_slice(clean.row(sb, sj).expect("unmasked"));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct Teacher {
    pub name: String,
    pub model: Model,
    pub malicious: bool,
}

/// Frozen teachers in arrival order, all on one vocabulary.
#[derive(Debug, Clone)]
pub struct TeacherSequence {
    teachers: Vec<Teacher>,
}

impl TeacherSequence {
    pub fn new(teachers: Vec<Teacher>) -> Result<Self> {
        let first = teachers.first().ok_or(CkdError::Empty("no teachers"))?;
        for t in &teachers {
            if !t.model.is_frozen() {
                return Err(CkdError::InvalidConfig(format!("teacher {} is not frozen", t.name)));
            }
            t.model.check_compatible(&first.model)?;
        }
        Ok(Self { teachers })
    }

    pub fn teachers(&self) -> &[Teacher] {
        &self.teachers
    }

    pub fn len(&self) -> usize {
        self.teachers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teachers.is_empty()
    }

    /// The teacher as the student sees it, wrapped when flagged malicious.
    pub fn predictor(&self, i: usize, seed: u64) -> Result<Box<dyn Predictor + '_>> {
        let t = &self.teachers[i];
        Ok(if t.malicious {
            Box::new(make_malicious(&t.model, derive_seed(seed, &format!("malicious/{}", t.name)))?)
        } else {
            Box::new(&t.model)
        })
    }
}

/// Corpora one step works on.
#[derive(Debug, Clone, Copy)]
pub struct StepData<'a> {
    pub train: &'a ParallelCorpus,
    pub trans: &'a ParallelCorpus,
    /// Early stopping.
    pub dev: &'a ParallelCorpus,
    /// BLEU reported in the history.
    pub test: &'a ParallelCorpus,
}

/// Previous parameters and their diagonal Fisher.
#[derive(Debug, Clone)]
pub struct EwcAnchor {
    pub params: Vec<f64>,
    pub fisher: Vec<f64>,
}

impl EwcAnchor {
    /// Fisher of `previous` over the transfer set.
    pub fn estimate(previous: &Model, trans: &ParallelCorpus) -> Result<Self> {
        Ok(Self { params: previous.params().to_vec(), fisher: fisher_diagonal(previous, &trans.pairs)? })
    }
}

/// `c Σ F_i (θ_i − θ*_i)²` and its gradient.
pub fn ewc_penalty(params: &[f64], anchor: &EwcAnchor, c: f64) -> Result<LossValue> {
    if params.len() != anchor.params.len() || params.len() != anchor.fisher.len() {
        return Err(CkdError::LengthMismatch(format!(
            "{} parameters against a {}-entry anchor",
            params.len(),
            anchor.params.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let d = params[i] - anchor.params[i];
        value += c * anchor.fisher[i] * d * d;
        grad[i] = 2.0 * c * anchor.fisher[i] * d;
    }
    Ok(LossValue { value, grad: Some(grad), clamped: 0 })
}

/// Element-wise mean of teacher distributions over the same sentences.
pub fn mean_distributions(batches: &[DistributionBatch]) -> Result<DistributionBatch> {
    let first = batches.first().ok_or(CkdError::Empty("no teacher distributions"))?;
    let lengths: Vec<usize> = (0..first.batch_size()).map(|b| first.length(b)).collect();
    let mut out = DistributionBatch::zeros(first.vocab_size(), lengths.clone());
    let w = 1.0 / batches.len() as f64;
    for d in batches {
        if d.vocab_size() != first.vocab_size() {
            return Err(CkdError::VocabMismatch("teachers over different vocabularies".into()));
        }
        if (0..d.batch_size()).map(|b| d.length(b)).ne(lengths.iter().copied()) {
            return Err(CkdError::LengthMismatch("teacher batches differ in shape".into()));
        }
        out.add_scaled(d, w);
    }
    Ok(out)
}

fn uniform_plan(pairs: &[SentencePair], w: f64) -> Vec<Vec<RowWeights>> {
    pairs.iter().map(|p| vec![RowWeights { pos: w, neg: 0.0 }; p.target.len()]).collect()
}

/// Everything one step optimizes besides CE.
struct Terms<'a> {
    /// Teacher (or averaged teachers) over the transfer set.
    teacher: &'a DistributionBatch,
    /// Filter with the configured policy; otherwise plain KD on every tuple.
    filtered: bool,
    lambda: f64,
    anchor: Option<&'a DistributionBatch>,
    ewc: Option<&'a EwcAnchor>,
}

struct SplitStats {
    plan: Vec<Vec<RowWeights>>,
    pos: usize,
    neg: usize,
    neg_active: usize,
}

fn split_stats(student: &Model, trans: &[SentencePair], terms: &Terms, cfg: &DistillConfig) -> Result<SplitStats> {
    if !terms.filtered {
        let rows = trans.iter().map(|p| p.target.len()).sum();
        return Ok(SplitStats { plan: uniform_plan(trans, 1.0), pos: rows, neg: 0, neg_active: 0 });
    }
    let s = student.forward_distributions(trans)?;
    let plan = policy_plan(cfg.policy, cfg.q_kind, terms.teacher, &s, trans, cfg.k_a, cfg.k_b)?;
    let (mut pos, mut neg, mut neg_active) = (0, 0, 0);
    for (b, j) in s.positions() {
        let w = plan[b][j];
        if w.pos != 0.0 {
            pos += 1;
        }
        if w.neg != 0.0 {
            neg += 1;
            let d = divergence(terms.teacher.row(b, j).expect("row"), s.row(b, j).expect("row"), cfg.divergence)?;
            if d < cfg.alpha {
                neg_active += 1;
            }
        }
    }
    Ok(SplitStats { plan, pos, neg, neg_active })
}

fn distill_objective<'a>(
    reference: &'a DistributionBatch,
    plan: &'a [Vec<RowWeights>],
    cfg: &DistillConfig,
    noise_seed: u64,
) -> DistillObjective<'a> {
    DistillObjective {
        reference,
        plan,
        alpha: cfg.alpha,
        kind: cfg.divergence,
        neg_form: cfg.neg_form,
        noise: cfg.noise,
        noise_seed,
    }
}

/// Full step objective over `train_ids` of D_train and `trans_ids` of
/// D_trans, with the distillation terms built from `kf_plan`.
#[allow(clippy::too_many_arguments)]
fn step_loss(
    student: &Model,
    data: &StepData,
    train_ids: &[usize],
    trans_ids: &[usize],
    terms: &Terms,
    kf_plan: &[Vec<RowWeights>],
    ki_plan: &[Vec<RowWeights>],
    cfg: &DistillConfig,
    want_grad: bool,
    dropout_seed: Option<u64>,
    noise_seed: u64,
) -> Result<LossValue> {
    let kf = distill_objective(terms.teacher, kf_plan, cfg, noise_seed);
    let ki = terms.anchor.map(|a| DistillObjective::positive(a, ki_plan, cfg.divergence));
    let mut distill: Vec<(f64, &dyn Objective)> = vec![(terms.lambda, &kf)];
    if let Some(ki) = ki.as_ref() {
        distill.push((1.0 - terms.lambda, ki));
    }
    let shared = std::ptr::eq(data.train, data.trans) || data.train.pairs == data.trans.pairs;
    let mut loss = if shared && train_ids == trans_ids {
        distill.push((cfg.ce_weight, &CrossEntropy));
        evaluate(student, &data.trans.pairs, trans_ids, &Weighted(distill), want_grad, dropout_seed)?
    } else {
        let ce = Weighted(vec![(cfg.ce_weight, &CrossEntropy)]);
        let mut l = evaluate(student, &data.train.pairs, train_ids, &ce, want_grad, dropout_seed)?;
        let d = evaluate(student, &data.trans.pairs, trans_ids, &Weighted(distill), want_grad, dropout_seed)?;
        l.add_scaled(&d, 1.0);
        l
    };
    if let Some(ewc) = terms.ewc {
        // The penalty is per token, like every other term.
        let tokens: usize = train_ids.iter().map(|&i| data.train.pairs[i].target.len()).sum();
        let p = ewc_penalty(student.params(), ewc, cfg.ewc_c)?;
        loss.add_scaled(&p, tokens as f64);
    }
    Ok(loss)
}

fn mean_ce(model: &Model, corpus: &ParallelCorpus) -> Result<f64> {
    let ids: Vec<usize> = (0..corpus.len()).collect();
    let l = evaluate(model, &corpus.pairs, &ids, &CrossEntropy, false, None)?;
    Ok(l.value / corpus.target_tokens() as f64)
}

struct FitOutcome {
    epochs: usize,
}

/// Minibatch Adam over the step objective with dev-CE early stopping.
fn fit(student: &mut Model, data: &StepData, terms: &Terms, cfg: &DistillConfig, step: usize) -> Result<FitOutcome> {
    if student.is_frozen() {
        return Err(CkdError::Frozen);
    }
    if data.train.is_empty() || data.trans.is_empty() {
        return Err(CkdError::Empty("training or transfer corpus"));
    }
    let ki_plan = uniform_plan(&data.trans.pairs, 1.0);
    let mut opt = Adam::new(cfg.optimizer.clone(), student.param_count());
    let mut stats: Option<SplitStats> = None;
    let (mut best, mut stale, mut epochs) = (f64::INFINITY, 0, 0);
    let shared = data.train.pairs == data.trans.pairs;
    for epoch in 0..cfg.epochs {
        if stats.is_none() || cfg.split_refresh == SplitRefresh::Epoch {
            stats = Some(split_stats(student, &data.trans.pairs, terms, cfg)?);
        }
        let kf_plan = &stats.as_ref().expect("split").plan;
        let mut rng = rng_for(cfg.seed, &format!("shuffle/{step}/{epoch}"));
        let mut train_order: Vec<usize> = (0..data.train.len()).collect();
        train_order.shuffle(&mut rng);
        let trans_order = if shared {
            train_order.clone()
        } else {
            let mut o: Vec<usize> = (0..data.trans.len()).collect();
            o.shuffle(&mut rng);
            o
        };
        let batches = data.train.len().div_ceil(cfg.batch_size);
        for b in 0..batches {
            let train_ids = &train_order[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(train_order.len())];
            let trans_ids = if shared {
                train_ids
            } else {
                let n = trans_order.len();
                &trans_order[b * n / batches..(b + 1) * n / batches]
            };
            let label = format!("{step}/{epoch}/{b}");
            let loss = step_loss(
                student,
                data,
                train_ids,
                trans_ids,
                terms,
                kf_plan,
                &ki_plan,
                cfg,
                true,
                Some(derive_seed(cfg.seed, &format!("dropout/{label}"))),
                derive_seed(cfg.seed, &format!("noise/{label}")),
            )?;
            train_step(student, &loss, &mut opt)?;
        }
        epochs += 1;
        let dev = mean_ce(student, data.dev)?;
        log::debug!("step={step} epoch={epoch} dev_ce={dev:.5}");
        if dev < best {
            best = dev;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break;
            }
        }
    }
    Ok(FitOutcome { epochs })
}

fn finish_step(
    student: &Model,
    data: &StepData,
    terms: &Terms,
    cfg: &DistillConfig,
    step: usize,
    teacher: &str,
    epochs: usize,
) -> Result<(Model, StepMetrics)> {
    let stats = split_stats(student, &data.trans.pairs, terms, cfg)?;
    let all: Vec<usize> = (0..data.trans.len()).collect();
    let tokens = data.trans.target_tokens() as f64;
    let ki_plan = uniform_plan(&data.trans.pairs, 1.0);
    let part = |t: &Terms, ce: f64| -> Result<f64> {
        let c = DistillConfig { ce_weight: ce, ..cfg.clone() };
        let d = StepData { train: data.trans, ..*data };
        Ok(step_loss(student, &d, &all, &all, t, &stats.plan, &ki_plan, &c, false, None, 0)?.value / tokens)
    };
    let kf = part(&Terms { lambda: 1.0, anchor: None, ewc: None, ..*terms }, 0.0)?;
    let ki = match terms.anchor {
        Some(_) => part(&Terms { lambda: 0.0, ewc: None, ..*terms }, 0.0)?,
        None => 0.0,
    };
    let ewc = terms.ewc.map(|e| ewc_penalty(student.params(), e, cfg.ewc_c).map(|l| l.value)).transpose()?;
    let losses = LossTrace { ce: mean_ce(student, data.train)?, kf, ki, ewc };
    log::info!("step={step} pos={} neg={} neg_active={}", stats.pos, stats.neg, stats.neg_active);
    let metrics = StepMetrics {
        step,
        teacher: teacher.to_string(),
        bleu: model_bleu(student, data.test)?.score,
        delta_bleu: 0.0,
        ad: 0.0,
        pos: stats.pos,
        neg: stats.neg,
        neg_active: stats.neg_active,
        epochs,
        losses,
    };
    Ok((student.snapshot(), metrics))
}

fn check_teacher(student: &Model, teacher: &dyn Predictor) -> Result<()> {
    if !teacher.is_frozen() {
        return Err(CkdError::InvalidConfig("teacher must be frozen".into()));
    }
    student.check_compatible(teacher)
}

/// Combined objective `w_CE·CE(D_train) + λ·KF(D_trans) + (1 − λ)·KI(D_trans)`
/// over whole corpora, with the split taken against the current student.
pub fn ckd_loss(
    student: &Model,
    teacher: &dyn Predictor,
    anchor: &InheritanceAnchor,
    data: &StepData,
    cfg: &DistillConfig,
    lambda: f64,
) -> Result<LossValue> {
    check_teacher(student, teacher)?;
    student.check_compatible(anchor.model())?;
    let t = corpus_distributions(teacher, &data.trans.pairs, cfg.teacher_batch)?;
    let a = anchor.reference(&data.trans.pairs)?;
    let terms = Terms { teacher: &t, filtered: true, lambda, anchor: Some(&a), ewc: None };
    let stats = split_stats(student, &data.trans.pairs, &terms, cfg)?;
    let train: Vec<usize> = (0..data.train.len()).collect();
    let trans: Vec<usize> = (0..data.trans.len()).collect();
    let ki_plan = uniform_plan(&data.trans.pairs, 1.0);
    step_loss(student, data, &train, &trans, &terms, &stats.plan, &ki_plan, cfg, !student.is_frozen(), None, cfg.seed)
}

/// `w_CE·CE(D_train) + KD(D_trans)` over whole corpora.
pub fn vanilla_kd_loss(student: &Model, teacher: &dyn Predictor, data: &StepData, cfg: &DistillConfig) -> Result<LossValue> {
    check_teacher(student, teacher)?;
    let t = corpus_distributions(teacher, &data.trans.pairs, cfg.teacher_batch)?;
    let terms = Terms { teacher: &t, filtered: false, lambda: 1.0, anchor: None, ewc: None };
    let plan = uniform_plan(&data.trans.pairs, 1.0);
    let train: Vec<usize> = (0..data.train.len()).collect();
    let trans: Vec<usize> = (0..data.trans.len()).collect();
    step_loss(student, data, &train, &trans, &terms, &plan, &plan, cfg, !student.is_frozen(), None, cfg.seed)
}

/// One CKD step at time `t`. Returns the frozen new student and its metrics.
pub fn ckd_step(
    student: &mut Model,
    teacher: &dyn Predictor,
    anchor: &InheritanceAnchor,
    data: &StepData,
    cfg: &DistillConfig,
    t: usize,
) -> Result<(Model, StepMetrics)> {
    cfg.validate()?;
    check_teacher(student, teacher)?;
    student.check_compatible(anchor.model())?;
    let lambda = lambda_schedule(t, &cfg.lambda)?;
    let tdist = corpus_distributions(teacher, &data.trans.pairs, cfg.teacher_batch)?;
    let adist = anchor.reference(&data.trans.pairs)?;
    let terms = Terms { teacher: &tdist, filtered: true, lambda, anchor: Some(&adist), ewc: None };
    let out = fit(student, data, &terms, cfg, t)?;
    finish_step(student, data, &terms, cfg, t, "", out.epochs)
}

/// CE plus unfiltered KD on every transfer tuple.
pub fn vanilla_kd_step(
    student: &mut Model,
    teacher: &dyn Predictor,
    data: &StepData,
    cfg: &DistillConfig,
    t: usize,
) -> Result<(Model, StepMetrics)> {
    cfg.validate()?;
    check_teacher(student, teacher)?;
    let tdist = corpus_distributions(teacher, &data.trans.pairs, cfg.teacher_batch)?;
    let terms = Terms { teacher: &tdist, filtered: false, lambda: 1.0, anchor: None, ewc: None };
    let out = fit(student, data, &terms, cfg, t)?;
    finish_step(student, data, &terms, cfg, t, "", out.epochs)
}

/// Vanilla KD plus the EWC penalty around `anchor`.
pub fn ewc_step(
    student: &mut Model,
    teacher: &dyn Predictor,
    anchor: &EwcAnchor,
    data: &StepData,
    cfg: &DistillConfig,
    t: usize,
) -> Result<(Model, StepMetrics)> {
    cfg.validate()?;
    check_teacher(student, teacher)?;
    let tdist = corpus_distributions(teacher, &data.trans.pairs, cfg.teacher_batch)?;
    let terms = Terms { teacher: &tdist, filtered: false, lambda: 1.0, anchor: None, ewc: Some(anchor) };
    let out = fit(student, data, &terms, cfg, t)?;
    finish_step(student, data, &terms, cfg, t, "", out.epochs)
}

/// One KD step against the mean distribution of all teachers at once.
pub fn multi_teacher_kd(
    student: &mut Model,
    teachers: &[&dyn Predictor],
    data: &StepData,
    cfg: &DistillConfig,
) -> Result<(Model, StepMetrics)> {
    cfg.validate()?;
    if teachers.is_empty() {
        return Err(CkdError::Empty("no teachers"));
    }
    let mut dists = Vec::with_capacity(teachers.len());
    for t in teachers {
        check_teacher(student, *t)?;
        dists.push(corpus_distributions(*t, &data.trans.pairs, cfg.teacher_batch)?);
    }
    let mean = mean_distributions(&dists)?;
    let terms = Terms { teacher: &mean, filtered: false, lambda: 1.0, anchor: None, ewc: None };
    let out = fit(student, data, &terms, cfg, 1)?;
    finish_step(student, data, &terms, cfg, 1, "", out.epochs)
}

/// History and the frozen student after every step (index 0 is the start).
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub history: RunHistory,
    pub snapshots: Vec<Model>,
}

/// Step 0 metrics of an untouched student.
fn initial_metrics(student: &Model, data: &StepData) -> Result<StepMetrics> {
    Ok(StepMetrics {
        step: 0,
        teacher: String::new(),
        bleu: model_bleu(student, data.test)?.score,
        delta_bleu: 0.0,
        ad: 0.0,
        pos: 0,
        neg: 0,
        neg_active: 0,
        epochs: 0,
        losses: LossTrace { ce: mean_ce(student, data.train)?, ..Default::default() },
    })
}

/// CKD over the whole teacher sequence.
pub fn run_sequence(
    student0: &Model,
    teachers: &TeacherSequence,
    data: &StepData,
    cfg: &DistillConfig,
) -> Result<RunOutput> {
    run_method(Method::Ckd, student0, teachers, data, cfg, "", &mut |_, _| Ok(()))
}

/// Runs `method` over `teachers`, calling `on_step` as soon as each step's
/// metrics and snapshot exist (step 0 included).
pub fn run_method(
    method: Method,
    student0: &Model,
    teachers: &TeacherSequence,
    data: &StepData,
    cfg: &DistillConfig,
    config_name: &str,
    on_step: &mut dyn FnMut(&StepMetrics, &Model) -> Result<()>,
) -> Result<RunOutput> {
    cfg.validate()?;
    if teachers.is_empty() {
        return Err(CkdError::Empty("no teachers"));
    }
    let mut student = student0.thawed();
    let mut history = RunHistory::new(method.name(), config_name);
    let mut snapshots = vec![student.snapshot()];
    history.push(initial_metrics(&student, data)?);
    on_step(&history.steps[0], &snapshots[0])?;

    let mut record = |history: &mut RunHistory, snapshots: &mut Vec<Model>, snap: Model, mut m: StepMetrics, name: String| {
        m.teacher = name;
        history.push(m);
        on_step(history.steps.last().expect("pushed"), &snap)?;
        snapshots.push(snap);
        Ok::<(), CkdError>(())
    };

    if method == Method::MultiTeacher {
        let wrapped = (0..teachers.len()).map(|i| teachers.predictor(i, cfg.seed)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&dyn Predictor> = wrapped.iter().map(|b| b.as_ref()).collect();
        let (snap, m) = multi_teacher_kd(&mut student, &refs, data, cfg)?;
        let name = teachers.teachers().iter().map(|t| t.name.as_str()).collect::<Vec<_>>().join("+");
        record(&mut history, &mut snapshots, snap, m, name)?;
        return Ok(RunOutput { history, snapshots });
    }

    for (i, teacher) in teachers.teachers().iter().enumerate() {
        let t = i + 1;
        let p = teachers.predictor(i, cfg.seed)?;
        let prev = snapshots.last().expect("step 0 snapshot");
        let (snap, m) = match method {
            Method::Ckd => ckd_step(&mut student, p.as_ref(), &InheritanceAnchor::new(prev, t), data, cfg, t)?,
            Method::Kd => vanilla_kd_step(&mut student, p.as_ref(), data, cfg, t)?,
            Method::Ewc => {
                let anchor = EwcAnchor::estimate(prev, data.trans)?;
                ewc_step(&mut student, p.as_ref(), &anchor, data, cfg, t)?
            }
            Method::MultiTeacher => unreachable!("handled above"),
        };
        record(&mut history, &mut snapshots, snap, m, teacher.name.clone())?;
    }
    Ok(RunOutput { history, snapshots })
}

/// Plain supervised training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 30, patience: 3, batch_size: 32, optimizer: OptimizerConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_dev_ce: f64,
}

/// CE training with early stopping; the parameters with the best dev CE are
/// kept.
pub fn train_model(model: &mut Model, train: &ParallelCorpus, dev: &ParallelCorpus, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.optimizer.validate()?;
    if cfg.batch_size == 0 {
        return Err(CkdError::InvalidConfig("batch size must be >= 1".into()));
    }
    if train.is_empty() || dev.is_empty() {
        return Err(CkdError::Empty("training or dev corpus"));
    }
    let mut opt = Adam::new(cfg.optimizer.clone(), model.param_count());
    let mut best = (mean_ce(model, dev)?, model.params().to_vec());
    let (mut stale, mut epochs) = (0, 0);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &format!("train/shuffle/{epoch}")));
        for (b, ids) in order.chunks(cfg.batch_size).enumerate() {
            let seed = derive_seed(cfg.seed, &format!("train/dropout/{epoch}/{b}"));
            let loss = evaluate(model, &train.pairs, ids, &CrossEntropy, true, Some(seed))?;
            train_step(model, &loss, &mut opt)?;
        }
        epochs += 1;
        let dev_ce = mean_ce(model, dev)?;
        log::debug!("train domain={} epoch={epoch} dev_ce={dev_ce:.5}", train.domain);
        if dev_ce < best.0 {
            best = (dev_ce, model.params().to_vec());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                break;
            }
        }
    }
    model.set_params(best.1)?;
    Ok(TrainReport { epochs, best_dev_ce: best.0 })
}
