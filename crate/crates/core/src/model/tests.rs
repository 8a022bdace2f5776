use super::*;
use crate::gradcheck::{finite_difference, max_relative_error};
use crate::testutil::{random_pairs, tiny_model, tiny_vocab};

const FAMILIES: [ArchFamily; 2] = [ArchFamily::Attention, ArchFamily::Recurrent];

#[test]
fn tiny_models_stay_under_500_params() {
    for f in FAMILIES {
        let n = tiny_model(f, 1).param_count();
        assert!(n <= 500, "{f:?} has {n} params");
    }
}

#[test]
fn rows_are_normalized_and_shaped() {
    for f in FAMILIES {
        let m = tiny_model(f, 3);
        let pairs = random_pairs(20, 3, 4);
        let d = m.forward_distributions(&pairs).unwrap();
        d.check_normalized(1e-6).unwrap();
        assert_eq!(d.num_rows(), pairs.iter().map(|p| p.target.len()).sum::<usize>());
        let again = m.forward_distributions(&pairs).unwrap();
        assert_eq!(d, again);
    }
}

#[test]
fn one_pair_of_three_targets_has_three_rows() {
    let m = tiny_model(ArchFamily::Attention, 0);
    let pair = SentencePair { source: vec![4, 5], target: vec![6, 7, EOS] };
    let d = m.forward_distributions(&[pair]).unwrap();
    assert_eq!(d.num_rows(), 3);
    assert!(d.row(0, 2).is_some() && d.row(0, 3).is_none());
}

#[test]
fn forward_rejects_bad_input() {
    let m = tiny_model(ArchFamily::Recurrent, 0);
    let bad = SentencePair { source: vec![4, 99], target: vec![5, EOS] };
    assert!(matches!(m.forward_distributions(&[bad]), Err(CkdError::TokenOutOfRange { id: 99, .. })));
    assert!(matches!(m.forward_distributions(&[]), Err(CkdError::Empty(_))));
    let mut nan = m.clone();
    let mut p = nan.params().to_vec();
    p[0] = f64::NAN;
    nan.set_params(p).unwrap();
    let ok = SentencePair { source: vec![4], target: vec![5, EOS] };
    assert!(matches!(nan.forward_distributions(&[ok]), Err(CkdError::NonFinite(_))));
}

#[test]
fn ce_matches_position_by_position_recount() {
    for f in FAMILIES {
        let m = tiny_model(f, 11);
        let pairs = random_pairs(3, 3, 12);
        let loss = ce_loss(&m, &pairs).unwrap();
        let mut expect = 0.0;
        for pair in &pairs {
            let d = m.forward_distributions(std::slice::from_ref(pair)).unwrap();
            for (j, &y) in pair.target.iter().enumerate() {
                expect -= d.row(0, j).unwrap()[y as usize].ln();
            }
        }
        assert!((loss.value - expect).abs() < 1e-10, "{} vs {}", loss.value, expect);
        assert_eq!(loss.clamped, 0);
    }
}

#[test]
fn ce_of_certain_and_e_inverse_predictions() {
    let pair = SentencePair { source: vec![4], target: vec![EOS] };
    let mut d = DistributionBatch::zeros(8, vec![1]);
    d.row_mut(0, 0)[EOS as usize] = 1.0;
    let r = engine::CrossEntropy.eval(&[0], std::slice::from_ref(&pair), &d, false).unwrap();
    assert_eq!(r.value, 0.0);

    let e_inv = (-1.0f64).exp();
    let row = d.row_mut(0, 0);
    row.fill((1.0 - e_inv) / 7.0);
    row[EOS as usize] = e_inv;
    let r = engine::CrossEntropy.eval(&[0], std::slice::from_ref(&pair), &d, false).unwrap();
    assert!((r.value - 1.0).abs() < 1e-12);
}

#[test]
fn ce_underflow_is_clamped_and_flagged() {
    let pair = SentencePair { source: vec![4], target: vec![5, EOS] };
    let mut d = DistributionBatch::zeros(8, vec![2]);
    d.row_mut(0, 0)[4] = 1.0;
    d.row_mut(0, 1)[EOS as usize] = 1.0;
    let r = engine::CrossEntropy.eval(&[0], std::slice::from_ref(&pair), &d, true).unwrap();
    assert_eq!(r.clamped, 1);
    assert!((r.value + PROB_FLOOR.ln()).abs() < 1e-9);
}

#[test]
fn ce_gradient_matches_finite_differences() {
    for f in FAMILIES {
        let m = tiny_model(f, 21);
        let pairs = random_pairs(4, 3, 22);
        let analytic = ce_loss(&m, &pairs).unwrap().grad.unwrap();
        let numeric = finite_difference(&m, 1e-5, |m| ce_loss(m, &pairs)).unwrap();
        let err = max_relative_error(&analytic, &numeric, 1e-4);
        assert!(err < 1e-3, "{f:?}: relative error {err}");
    }
}

#[test]
fn frozen_models_carry_no_gradient() {
    let m = tiny_model(ArchFamily::Attention, 1).snapshot();
    let loss = ce_loss(&m, &random_pairs(2, 3, 1)).unwrap();
    assert!(!loss.has_grad());
}

#[test]
fn zero_gradient_leaves_params_unchanged() {
    let mut m = tiny_model(ArchFamily::Recurrent, 5);
    let before = m.params().to_vec();
    let mut opt = Adam::new(OptimizerConfig::default(), m.param_count());
    let zero = LossValue::zero(m.param_count());
    train_step(&mut m, &zero, &mut opt).unwrap();
    assert_eq!(before, m.params());
}

#[test]
fn adam_descends_a_quadratic_bowl() {
    let mut theta = vec![0.5, -1.25, 2.0];
    let norm = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>();
    let mut opt = Adam::new(OptimizerConfig { lr: 1e-2, ..Default::default() }, 3);
    let before = norm(&theta);
    let grad: Vec<f64> = theta.iter().map(|x| 2.0 * x).collect();
    opt.step(&mut theta, &grad).unwrap();
    assert!(norm(&theta) < before);
}

#[test]
fn training_halves_ce_on_ten_pairs() {
    for f in FAMILIES {
        let mut m = tiny_model(f, 8);
        let pairs = random_pairs(10, 3, 9);
        let start = ce_loss(&m, &pairs).unwrap().value;
        let mut opt = Adam::new(OptimizerConfig { lr: 1e-2, ..Default::default() }, m.param_count());
        for _ in 0..200 {
            let loss = ce_loss(&m, &pairs).unwrap();
            train_step(&mut m, &loss, &mut opt).unwrap();
        }
        let end = ce_loss(&m, &pairs).unwrap().value;
        assert!(end <= 0.5 * start, "{f:?}: {start} -> {end}");
    }
}

#[test]
fn snapshots_are_isolated_frozen_and_idempotent() {
    let mut m = tiny_model(ArchFamily::Attention, 2);
    let pairs = random_pairs(5, 3, 3);
    let snap = m.snapshot();
    let before = snap.forward_distributions(&pairs).unwrap();
    let mut opt = Adam::new(OptimizerConfig { lr: 1e-2, ..Default::default() }, m.param_count());
    for _ in 0..10 {
        let loss = ce_loss(&m, &pairs).unwrap();
        train_step(&mut m, &loss, &mut opt).unwrap();
    }
    assert!(!m.is_frozen());
    assert_eq!(snap.forward_distributions(&pairs).unwrap(), before);
    assert_eq!(snap.snapshot().forward_distributions(&pairs).unwrap(), before);

    let mut frozen = snap.clone();
    let zero = LossValue::zero(frozen.param_count());
    assert!(matches!(train_step(&mut frozen, &zero, &mut opt), Err(CkdError::Frozen)));
}

#[test]
fn non_finite_gradient_is_reported() {
    let mut m = tiny_model(ArchFamily::Attention, 2);
    let mut loss = LossValue::zero(m.param_count());
    loss.grad.as_mut().unwrap()[3] = f64::INFINITY;
    let mut opt = Adam::new(OptimizerConfig::default(), m.param_count());
    assert!(matches!(train_step(&mut m, &loss, &mut opt), Err(CkdError::NonFinite(_))));
}

#[test]
fn eos_first_model_decodes_to_empty() {
    let mut m = tiny_model(ArchFamily::Attention, 4);
    let spec = m.layout().specs().iter().find(|s| s.name == "out.b").unwrap().clone();
    let mut p = m.params().to_vec();
    p[spec.offset + EOS as usize] = 100.0;
    m.set_params(p).unwrap();
    assert!(m.greedy_decode(&[4, 5, 6], 5).is_empty());
}

#[test]
fn decoding_respects_max_len() {
    for f in FAMILIES {
        let mut m = tiny_model(f, 4);
        let spec = m.layout().specs().iter().find(|s| s.name == "out.b").unwrap().clone();
        let mut p = m.params().to_vec();
        p[spec.offset + 5] = 100.0;
        m.set_params(p).unwrap();
        for max_len in 1..5 {
            let out = m.greedy_decode(&[4, 6], max_len);
            assert_eq!(out, vec![5; max_len]);
        }
    }
}

#[test]
fn argmax_prefers_lowest_id_on_ties() {
    assert_eq!(argmax(&[0.1, 0.4, 0.4, 0.1]), 1);
    assert_eq!(argmax(&[0.25; 4]), 0);
}

#[test]
fn checkpoint_round_trips_exactly() {
    for f in FAMILIES {
        let mut m = tiny_model(f, 6);
        m.meta.insert("domain".into(), "A".into());
        let pairs = random_pairs(4, 3, 7);
        let mut opt = Adam::new(OptimizerConfig::default(), m.param_count());
        let loss = ce_loss(&m, &pairs).unwrap();
        train_step(&mut m, &loss, &mut opt).unwrap();
        let snap = m.snapshot();
        let back = checkpoint::from_bytes(&checkpoint::to_bytes(&snap).unwrap()).unwrap();
        assert_eq!(back.params(), snap.params());
        assert!(back.is_frozen());
        assert_eq!(back.meta, snap.meta);
        assert_eq!(back.forward_distributions(&pairs).unwrap(), snap.forward_distributions(&pairs).unwrap());
        back.check_vocab(&tiny_vocab()).unwrap();
    }
}

#[test]
fn checkpoint_rejects_garbage_and_future_versions() {
    let m = tiny_model(ArchFamily::Recurrent, 6);
    let mut bytes = checkpoint::to_bytes(&m).unwrap();
    assert!(checkpoint::from_bytes(&bytes[..10]).is_err());
    assert!(checkpoint::from_bytes(b"nonsense").is_err());
    bytes[8] = 9;
    assert!(matches!(checkpoint::from_bytes(&bytes), Err(CkdError::Schema { found: 9, .. })));
}

#[test]
fn dropout_changes_training_loss_but_not_inference() {
    let mut arch = crate::testutil::tiny_arch(ArchFamily::Attention);
    arch.dropout = 0.3;
    let m = Model::new(&arch, &tiny_vocab(), 1).unwrap();
    let pairs = random_pairs(6, 3, 2);
    let plain = ce_loss(&m, &pairs).unwrap().value;
    let noisy = evaluate(&m, &pairs, &[0, 1, 2, 3, 4, 5], &engine::CrossEntropy, true, Some(5)).unwrap().value;
    let noisy2 = evaluate(&m, &pairs, &[0, 1, 2, 3, 4, 5], &engine::CrossEntropy, true, Some(5)).unwrap().value;
    assert_ne!(plain, noisy);
    assert_eq!(noisy, noisy2);
}

#[test]
fn fisher_is_mean_of_squared_token_gradients() {
    let m = tiny_model(ArchFamily::Recurrent, 13);
    let pairs = random_pairs(3, 3, 14);
    let fisher = engine::fisher_diagonal(&m, &pairs).unwrap();
    assert!(fisher.iter().all(|f| *f >= 0.0));
    // One-token corpus: Fisher is the squared single-token gradient.
    let one = SentencePair { source: vec![4], target: vec![EOS] };
    let f1 = engine::fisher_diagonal(&m, std::slice::from_ref(&one)).unwrap();
    let g = ce_loss(&m, std::slice::from_ref(&one)).unwrap().grad.unwrap();
    for (a, b) in f1.iter().zip(&g) {
        assert!((a - b * b).abs() < 1e-12);
    }
}
