use super::*;
use crate::autograd::softmax;
use crate::corpus::{as_transfer_tuples, CorpusRole, ParallelCorpus, EOS};
use crate::gradcheck::{finite_difference, max_relative_error};
use crate::model::ArchFamily;
use crate::testutil::{random_dist, random_pairs, tiny_model};
use proptest::prelude::*;
use rand::SeedableRng;

fn rng(seed: u64) -> crate::seed::Rng {
    crate::seed::Rng::seed_from_u64(seed)
}

fn corpus(pairs: Vec<SentencePair>) -> ParallelCorpus {
    ParallelCorpus { domain: "t".into(), role: CorpusRole::Transfer, pairs }
}

fn tuples(n: usize, seed: u64) -> Vec<TransferTuple> {
    as_transfer_tuples(&corpus(random_pairs(n, 3, seed))).collect()
}

/// Single-row batch holding `row`.
fn one_row(row: &[f64]) -> DistributionBatch {
    let mut d = DistributionBatch::zeros(row.len(), vec![1]);
    d.row_mut(0, 0).copy_from_slice(row);
    d
}

fn dummy_seq(len: usize) -> Vec<SentencePair> {
    vec![SentencePair { source: vec![4], target: vec![EOS; len] }]
}

fn two_point(q: f64) -> Vec<f64> {
    vec![q, 1.0 - q]
}

#[test]
fn divergence_examples() {
    let p = [0.9, 0.1];
    let q = [0.5, 0.5];
    let direct = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
    let kl = divergence(&p, &q, DivergenceKind::Kl).unwrap();
    assert!((kl - direct).abs() < 1e-12);
    assert!((kl - 0.3681).abs() < 1e-4);
    assert_eq!(divergence(&p, &p, DivergenceKind::Kl).unwrap(), 0.0);
    assert_eq!(divergence(&p, &p, DivergenceKind::InverseKl).unwrap(), 0.0);
    assert_eq!(
        divergence(&p, &q, DivergenceKind::Kl).unwrap(),
        divergence(&q, &p, DivergenceKind::InverseKl).unwrap()
    );
    assert!(divergence(&[0.5, 0.6], &q, DivergenceKind::Kl).is_err());
    assert!(divergence(&[1.0], &q, DivergenceKind::Kl).is_err());
}

#[test]
fn divergence_is_non_negative_and_zero_only_on_equality() {
    let mut r = rng(1);
    for _ in 0..10_000 {
        let p = random_dist(5, &mut r);
        let q = random_dist(5, &mut r);
        for kind in [DivergenceKind::Kl, DivergenceKind::InverseKl] {
            let d = divergence(&p, &q, kind).unwrap();
            assert!(d > 0.0, "{p:?} {q:?} {d}");
            assert!(divergence(&p, &p, kind).unwrap().abs() < 1e-12);
        }
    }
}

#[test]
fn table_seven_first_case_is_positive() {
    let teacher = [0.396, 0.604];
    let student = [0.010, 0.990];
    assert!(teacher_is_better(QFunctionKind::TokenCe, &teacher, &student, 0).unwrap());
    assert!(!teacher_is_better(QFunctionKind::TokenCe, &teacher, &teacher, 0).unwrap());
}

#[test]
fn hinge_gate_examples() {
    assert!((neg_contribution(0.1, 0.085, NegForm::Hinge) - 0.015).abs() < 1e-12);
    assert_eq!(neg_contribution(0.1, 3.921, NegForm::Hinge), 0.0);
    assert_eq!(neg_contribution(0.1, 0.1, NegForm::Hinge), 0.0);
    assert_eq!(neg_contribution(0.1, 0.085, NegForm::LiteralMin), 0.0);
    assert!((neg_contribution(0.1, 0.5, NegForm::LiteralMin) + 0.4).abs() < 1e-12);
}

/// Student row with `KL(teacher ‖ student) = target`, found by bisection.
fn student_at_divergence(teacher: &[f64], target: f64) -> Vec<f64> {
    let (mut lo, mut hi) = (teacher[0], 1.0 - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if divergence(teacher, &two_point(mid), DivergenceKind::Kl).unwrap() < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    two_point(0.5 * (lo + hi))
}

#[test]
fn negative_objective_reproduces_gate_on_rows() {
    let teacher = two_point(0.5);
    let plan = vec![vec![RowWeights { pos: 0.0, neg: 1.0 }]];
    let reference = one_row(&teacher);
    let obj = DistillObjective { alpha: 0.1, ..DistillObjective::positive(&reference, &plan, DivergenceKind::Kl) };
    let near = student_at_divergence(&teacher, 0.085);
    let r = obj.eval(&[0], &dummy_seq(1), &one_row(&near), false).unwrap();
    assert!((r.value - 0.015).abs() < 1e-9, "{}", r.value);
    let far = student_at_divergence(&teacher, 2.0);
    let r = obj.eval(&[0], &dummy_seq(1), &one_row(&far), true).unwrap();
    assert_eq!(r.value, 0.0);
    assert!(r.dprobs.unwrap().row(0, 0).unwrap().iter().all(|g| *g == 0.0));
}

#[test]
fn alpha_must_be_positive() {
    let t = tiny_model(ArchFamily::Attention, 1).snapshot();
    let s = tiny_model(ArchFamily::Attention, 2);
    let tu = tuples(2, 3);
    assert!(neg_kd_loss(&t, &s, &tu, 0.0).is_err());
    assert!(neg_kd_loss(&t, &s, &tu, -1.0).is_err());
}

#[test]
fn identical_models_split_everything_negative() {
    let s = tiny_model(ArchFamily::Recurrent, 4);
    let tu = tuples(6, 5);
    for kind in QFunctionKind::ALL {
        let split = split_transfer(&s.snapshot(), &s, &tu, kind).unwrap();
        assert!(split.positive.is_empty());
        assert_eq!(split.negative.len(), tu.len());
    }
}

#[test]
fn model_split_is_exact_partition() {
    let t = tiny_model(ArchFamily::Attention, 6).snapshot();
    let s = tiny_model(ArchFamily::Recurrent, 7);
    let tu = tuples(400, 8);
    assert!(tu.len() >= 1000);
    let tu = &tu[..1000];
    let split = split_transfer(&t, &s, tu, QFunctionKind::TokenCe).unwrap();
    assert_eq!(split.positive.len() + split.negative.len(), 1000);
    // Brute-force recount: one forward call per tuple.
    let mut pos = 0;
    for tuple in tu {
        let mut target = tuple.prefix.clone();
        target.push(tuple.target_token);
        let pair = SentencePair { source: tuple.source.clone(), target };
        let j = tuple.prefix.len();
        let pt = t.forward_distributions(std::slice::from_ref(&pair)).unwrap().row(0, j).unwrap().to_vec();
        let ps = s.forward_distributions(std::slice::from_ref(&pair)).unwrap().row(0, j).unwrap().to_vec();
        if pt[tuple.target_token as usize] > ps[tuple.target_token as usize] {
            pos += 1;
            assert!(split.positive.contains(tuple));
        } else {
            assert!(split.negative.contains(tuple));
        }
    }
    assert_eq!(pos, split.positive.len());
}

#[test]
fn split_rejects_vocab_mismatch() {
    let other = crate::model::Model::new(
        &crate::testutil::tiny_arch(ArchFamily::Attention),
        &crate::corpus::Vocab::new(["a", "b", "c", "zz"]).unwrap(),
        1,
    )
    .unwrap()
    .snapshot();
    let s = tiny_model(ArchFamily::Attention, 2);
    assert!(matches!(
        split_transfer(&other, &s, &tuples(2, 1), QFunctionKind::TokenCe),
        Err(CkdError::VocabMismatch(_))
    ));
}

#[test]
fn kd_of_a_copy_is_zero_and_empty_is_zero() {
    let s = tiny_model(ArchFamily::Attention, 9);
    let l = kd_loss(&s.snapshot(), &s, &tuples(5, 1), DivergenceKind::Kl).unwrap();
    assert!(l.value.abs() < 1e-6);
    let e = kd_loss(&s.snapshot(), &s, &[], DivergenceKind::Kl).unwrap();
    assert_eq!(e.value, 0.0);
    assert!(e.grad.unwrap().iter().all(|g| *g == 0.0));
}

/// Per-tuple divergences from one forward call per tuple.
fn per_tuple(t: &dyn Predictor, s: &Model, tu: &[TransferTuple], kind: DivergenceKind) -> Vec<f64> {
    tu.iter()
        .map(|tuple| {
            let mut target = tuple.prefix.clone();
            target.push(tuple.target_token);
            let pair = [SentencePair { source: tuple.source.clone(), target }];
            let j = tuple.prefix.len();
            let pt = t.forward_distributions(&pair).unwrap();
            let ps = s.forward_distributions(&pair).unwrap();
            divergence(pt.row(0, j).unwrap(), ps.row(0, j).unwrap(), kind).unwrap()
        })
        .collect()
}

#[test]
fn kd_matches_independent_per_tuple_sum() {
    let t = tiny_model(ArchFamily::Recurrent, 10).snapshot();
    let s = tiny_model(ArchFamily::Attention, 11);
    let tu: Vec<TransferTuple> = tuples(4, 12).into_iter().take(5).collect();
    for kind in [DivergenceKind::Kl, DivergenceKind::InverseKl] {
        let expect: f64 = per_tuple(&t, &s, &tu, kind).iter().sum();
        let got = kd_loss(&t, &s, &tu, kind).unwrap().value;
        assert!((got - expect).abs() < 1e-10, "{kind:?}: {got} vs {expect}");
    }
}

#[test]
fn neg_matches_independent_per_tuple_hinges() {
    let t = tiny_model(ArchFamily::Recurrent, 13).snapshot();
    let s = tiny_model(ArchFamily::Attention, 14);
    let tu = tuples(6, 15);
    let d = per_tuple(&t, &s, &tu, DivergenceKind::Kl);
    let alpha = d.iter().sum::<f64>() / d.len() as f64;
    let expect: f64 = d.iter().map(|d| (alpha - d).max(0.0)).sum();
    let got = neg_kd_loss(&t, &s, &tu, alpha).unwrap().value;
    assert!((got - expect).abs() < 1e-10);
    assert!(got > 0.0);
}

#[test]
fn kf_weights_are_linear() {
    let t = tiny_model(ArchFamily::Attention, 16).snapshot();
    let s = tiny_model(ArchFamily::Attention, 17);
    let tu = tuples(8, 18);
    let split = split_transfer(&t, &s, &tu, QFunctionKind::TokenCe).unwrap();
    assert!(!split.positive.is_empty() && !split.negative.is_empty());
    let alpha = 0.5;
    let kd = kd_loss(&t, &s, &split.positive, DivergenceKind::Kl).unwrap().value;
    let neg = neg_kd_loss(&t, &s, &split.negative, alpha).unwrap().value;
    let only_pos = kf_loss(&t, &s, &split, alpha, 1.0, 0.0, DivergenceKind::Kl).unwrap().value;
    assert!((only_pos - kd).abs() < 1e-10);
    let both = kf_loss(&t, &s, &split, alpha, 1.0, 1.0, DivergenceKind::Kl).unwrap().value;
    assert!((both - kd - neg).abs() < 1e-10);
    let doubled = kf_loss(&t, &s, &split, alpha, 1.0, 2.0, DivergenceKind::Kl).unwrap().value;
    assert!(((doubled - kd) - 2.0 * (both - kd)).abs() < 1e-10);
    assert!(kf_loss(&t, &s, &split, alpha, -1.0, 1.0, DivergenceKind::Kl).is_err());
}

#[test]
fn trivial_policy_on_a_copy_is_zero() {
    let s = tiny_model(ArchFamily::Recurrent, 19);
    let l = apply_filtration_policy(FiltrationPolicy::Trivial, &s.snapshot(), &s, &tuples(5, 2), 0.1).unwrap();
    assert!(l.value.abs() < 1e-6);
}

#[test]
fn hard_label_policy_discards_when_both_correct() {
    let both = [0.1, 0.8, 0.1];
    let also = [0.2, 0.6, 0.2];
    for p in [FiltrationPolicy::HardLabelMatching, FiltrationPolicy::HardLabelMatchingWithFiltration] {
        assert_eq!(decide(p, QFunctionKind::TokenCe, &both, &also, 1).unwrap(), RowAction::Discarded);
    }
}

#[test]
fn policy_table_cells() {
    use FiltrationPolicy as P;
    use RowAction::{Discarded as D, Negative as N, Positive as Pos};
    let q = QFunctionKind::TokenCe;
    // gold = 0. (teacher, student) rows for each cell and ΔQ sign.
    let cc_up = ([0.9, 0.1], [0.6, 0.4]);
    let cc_down = ([0.6, 0.4], [0.9, 0.1]);
    let ww_up = ([0.4, 0.6], [0.1, 0.9]);
    let ww_down = ([0.1, 0.9], [0.4, 0.6]);
    let sc = ([0.3, 0.7], [0.8, 0.2]);
    let tc = ([0.8, 0.2], [0.3, 0.7]);
    let expect: [(P, [RowAction; 6]); 8] = [
        (P::Trivial, [Pos, Pos, Pos, Pos, Pos, Pos]),
        (P::HardLabelMatching, [D, D, D, D, D, Pos]),
        (P::HardLabelMatchingWithFiltration, [D, D, D, D, N, Pos]),
        (P::TokenCe, [Pos, D, Pos, D, D, Pos]),
        (P::TokenCeWithFiltration, [Pos, N, Pos, N, N, Pos]),
        (P::Hybrid1, [Pos, N, Pos, D, N, Pos]),
        (P::Hybrid2, [Pos, D, Pos, N, N, Pos]),
        (P::Hybrid3, [D, N, Pos, N, N, Pos]),
    ];
    for (policy, row) in expect {
        let cells = [cc_up, cc_down, ww_up, ww_down, sc, tc];
        for (i, (t, s)) in cells.iter().enumerate() {
            assert_eq!(decide(policy, q, t, s, 0).unwrap(), row[i], "{policy:?} cell {i}");
        }
    }
}

#[test]
fn filtration_policy_equals_kf_loss_on_models() {
    let t = tiny_model(ArchFamily::Recurrent, 20).snapshot();
    let s = tiny_model(ArchFamily::Attention, 21);
    let tu: Vec<TransferTuple> = tuples(70, 22).into_iter().take(200).collect();
    assert_eq!(tu.len(), 200);
    let alpha = 0.3;
    let split = split_transfer(&t, &s, &tu, QFunctionKind::TokenCe).unwrap();
    let a = kf_loss(&t, &s, &split, alpha, 1.0, 1.0, DivergenceKind::Kl).unwrap();
    let b = apply_filtration_policy(FiltrationPolicy::TokenCeWithFiltration, &t, &s, &tu, alpha).unwrap();
    assert!((a.value - b.value).abs() < 1e-9);
    let (ga, gb) = (a.grad.unwrap(), b.grad.unwrap());
    assert!(ga.iter().zip(&gb).all(|(x, y)| (x - y).abs() < 1e-9));
}

#[test]
fn tuple_layout_groups_by_sentence() {
    let tu = tuples(5, 23);
    let layout = TupleLayout::new(&tu);
    assert_eq!(layout.pairs.len(), 5);
    let mut shuffled = tu.clone();
    shuffled.reverse();
    let l2 = TupleLayout::new(&shuffled);
    assert_eq!(l2.pairs.len(), 5);
    for (t, &(g, j)) in shuffled.iter().zip(&l2.rows) {
        assert_eq!(l2.pairs[g].target[j], t.target_token);
        assert_eq!(&l2.pairs[g].target[..j], &t.prefix[..]);
    }
}

#[test]
fn uniform_and_normal_noise_are_distributions() {
    let batch = one_row(&[0.25; 4]);
    for kind in [NoiseKind::Uniform, NoiseKind::Normal] {
        for seed in 0..20 {
            let d = sample_noise_distribution(NoiseSource { kind, sample_size: 3 }, &batch, &mut rng(seed)).unwrap();
            assert_eq!(d[0].len(), 3);
            for draw in &d[0] {
                assert!((draw.dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn shuffled_noise_draws_the_other_row() {
    let mut batch = DistributionBatch::zeros(2, vec![2]);
    batch.row_mut(0, 0).copy_from_slice(&[0.9, 0.1]);
    batch.row_mut(0, 1).copy_from_slice(&[0.2, 0.8]);
    let src = NoiseSource { kind: NoiseKind::ShuffledBatchDetached, sample_size: 1 };
    let d = sample_noise_distribution(src, &batch, &mut rng(1)).unwrap();
    assert_eq!(d[0][0].dist, vec![0.2, 0.8]);
    assert_eq!(d[1][0].dist, vec![0.9, 0.1]);
    assert_eq!(d[0][0].from, Some((0, 1)));
    assert!(sample_noise_distribution(src, &one_row(&[0.5, 0.5]), &mut rng(1)).is_err());
}

#[test]
fn detached_noise_sends_no_gradient_to_the_sampled_row() {
    // Row 1 is discarded, so any gradient it receives comes from being
    // sampled as noise for row 0.
    let mut batch = DistributionBatch::zeros(3, vec![2]);
    batch.row_mut(0, 0).copy_from_slice(&[0.5, 0.3, 0.2]);
    batch.row_mut(0, 1).copy_from_slice(&[0.45, 0.35, 0.2]);
    let reference = batch.clone();
    let plan = vec![vec![RowWeights { pos: 0.0, neg: 1.0 }, RowWeights::default()]];
    for (kind, expect_zero) in [(NoiseKind::ShuffledBatchDetached, true), (NoiseKind::ShuffledBatchAttached, false)] {
        let obj = DistillObjective {
            alpha: 1.0,
            noise: NoiseSource { kind, sample_size: 1 },
            ..DistillObjective::positive(&reference, &plan, DivergenceKind::Kl)
        };
        let r = obj.eval(&[0], &dummy_seq(2), &batch, true).unwrap();
        let g = r.dprobs.unwrap();
        let other_zero = g.row(0, 1).unwrap().iter().all(|x| *x == 0.0);
        assert_eq!(other_zero, expect_zero, "{kind:?}");
        assert!(r.value > 0.0);
    }
}

#[test]
fn noise_objective_gradient_matches_finite_differences() {
    // Detached draws are constants by definition, so only these two have a
    // finite-difference oracle.
    for kind in [NoiseKind::Uniform, NoiseKind::ShuffledBatchAttached] {
        let s = tiny_model(ArchFamily::Attention, 30);
        let pairs = random_pairs(4, 3, 31);
        let reference = s.forward_distributions(&pairs).unwrap();
        let plan: Vec<Vec<RowWeights>> =
            pairs.iter().map(|p| vec![RowWeights { pos: 0.0, neg: 1.0 }; p.target.len()]).collect();
        let obj = DistillObjective {
            alpha: 5.0,
            noise: NoiseSource { kind, sample_size: 2 },
            noise_seed: 3,
            ..DistillObjective::positive(&reference, &plan, DivergenceKind::Kl)
        };
        let ids = [0, 1, 2, 3];
        let f = |m: &Model| evaluate(m, &pairs, &ids, &obj, true, None);
        let analytic = f(&s).unwrap().grad.unwrap();
        let numeric = finite_difference(&s, 1e-5, f).unwrap();
        let err = max_relative_error(&analytic, &numeric, 1e-4);
        assert!(err < 1e-3, "{kind:?}: {err}");
    }
}

#[test]
fn kd_and_neg_gradients_match_finite_differences() {
    for family in [ArchFamily::Attention, ArchFamily::Recurrent] {
        let t = tiny_model(ArchFamily::Recurrent, 40).snapshot();
        let s = tiny_model(family, 41);
        let tu = tuples(4, 42);
        for kind in [DivergenceKind::Kl, DivergenceKind::InverseKl] {
            let f = |m: &Model| kd_loss(&t, m, &tu, kind);
            let err = max_relative_error(&f(&s).unwrap().grad.unwrap(), &finite_difference(&s, 1e-5, f).unwrap(), 1e-4);
            assert!(err < 1e-3, "KD {family:?} {kind:?}: {err}");
        }
        let d = per_tuple(&t, &s, &tu, DivergenceKind::Kl);
        // Margin between hinge kinks so finite differences stay on one side.
        let mut sorted = d.clone();
        sorted.sort_by(f64::total_cmp);
        let alpha = 0.5 * (sorted[sorted.len() / 2] + sorted[sorted.len() / 2 + 1]);
        let f = |m: &Model| neg_kd_loss(&t, m, &tu, alpha);
        let l = f(&s).unwrap();
        assert!(l.value > 0.0);
        let err = max_relative_error(&l.grad.unwrap(), &finite_difference(&s, 1e-5, f).unwrap(), 1e-4);
        assert!(err < 1e-3, "NEG {family:?}: {err}");
    }
}

#[test]
fn hinge_step_pushes_student_away() {
    let mut r = rng(50);
    for _ in 0..100 {
        let t = random_dist(6, &mut r);
        // Student logits near the teacher's so the hinge is active.
        let z: Vec<f64> = t.iter().map(|p| p.ln() + rand::Rng::random_range(&mut r, -0.2..0.2)).collect();
        let s = softmax(&z);
        let alpha = divergence(&t, &s, DivergenceKind::Kl).unwrap() + 0.5;
        let reference = one_row(&t);
        let plan = vec![vec![RowWeights { pos: 0.0, neg: 1.0 }]];
        let obj = DistillObjective { alpha, ..DistillObjective::positive(&reference, &plan, DivergenceKind::Kl) };
        let g = obj.eval(&[0], &dummy_seq(1), &one_row(&s), true).unwrap().dprobs.unwrap();
        let g = g.row(0, 0).unwrap();
        let dot: f64 = s.iter().zip(g).map(|(a, b)| a * b).sum();
        let z2: Vec<f64> = z.iter().zip(&s).zip(g).map(|((z, p), g)| z - 1e-3 * p * (g - dot)).collect();
        let before = divergence(&t, &s, DivergenceKind::Kl).unwrap();
        let after = divergence(&t, &softmax(&z2), DivergenceKind::Kl).unwrap();
        assert!(after > before, "{before} -> {after}");
    }
}

proptest! {
    #[test]
    fn gate_is_monotone_and_zero_past_alpha(alpha in 1e-3f64..2.0, d1 in 0.0f64..4.0, d2 in 0.0f64..4.0) {
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let (a, b) = (neg_contribution(alpha, lo, NegForm::Hinge), neg_contribution(alpha, hi, NegForm::Hinge));
        prop_assert!(a >= b);
        if hi >= alpha {
            prop_assert_eq!(b, 0.0);
        }
    }

    #[test]
    fn row_split_is_a_partition(seed in 0u64..u64::MAX, rows in 1usize..40) {
        let mut r = rng(seed);
        let mut pos = 0;
        let mut neg = 0;
        for _ in 0..rows {
            let t = random_dist(5, &mut r);
            let s = random_dist(5, &mut r);
            let gold = rand::Rng::random_range(&mut r, 0..5u32);
            if teacher_is_better(QFunctionKind::TokenCe, &t, &s, gold).unwrap() { pos += 1 } else { neg += 1 }
        }
        prop_assert_eq!(pos + neg, rows);
    }
}
