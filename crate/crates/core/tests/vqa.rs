use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sslab_core::data::{generate_split, SplitConfig, SplitKind, Vocabulary};
use sslab_core::gradcheck::gradient_check;
use sslab_core::nn::{AdamState, EncoderConfig, HeadInit, QuestionEncoderConfig};
use sslab_core::vqa::{
    calibration_bins, cross_entropy, ece, evaluate, evaluate_logits, fuse, one_hot, train_vqa,
    EarlyStopper, QaSet, VqaModel, VqaTrainConfig, ANSWERS,
};
use sslab_core::{Error, ParamStore, Tape, Tensor};

fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        input_size: 8,
        in_channels: 3,
        stem_channels: 4,
        stem_stride: 1,
        stages: 1,
        blocks_per_stage: 1,
        embed_dim: 6,
        norm_groups: 2,
        slope: 0.2,
    }
}

fn tiny_question() -> QuestionEncoderConfig {
    QuestionEncoderConfig {
        vocab_size: Vocabulary::default().len(),
        embed_dim: 5,
        hidden_dim: 7,
    }
}

fn tiny_model(seed: u64, init: HeadInit) -> (ParamStore, VqaModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let m = VqaModel::new(&mut store, &tiny_encoder(), &tiny_question(), 8, init, &mut rng).unwrap();
    (store, m)
}

fn fixed_inputs() -> (Tensor, Vec<Vec<usize>>) {
    let x = Tensor::from_fn(&[2, 3, 8, 8], |i| ((i % 17) as f32 / 8.0) - 1.0);
    let v = Vocabulary::default();
    let q = vec![
        v.encode("there is a blue object in the image ; what is it ?"),
        v.encode("what shape is the red object ?"),
    ];
    (x, q)
}

/// Labelled split with blank images of the tiny encoder's size.
fn blank_set(kind: SplitKind, scale: f64) -> QaSet {
    let cfg = SplitConfig {
        scale,
        seed: 3,
        ..SplitConfig::default()
    };
    let split = generate_split(&cfg, kind).unwrap();
    let n = split.examples.len();
    let qa: Vec<_> = split.examples.iter().map(|e| e.qa.clone().unwrap()).collect();
    QaSet {
        images: Tensor::zeros(&[n, 3, 8, 8]),
        questions: qa.iter().map(|q| q.tokens.clone()).collect(),
        answers: qa.iter().map(|q| q.answer_index()).collect(),
        ids: (0..n).collect(),
    }
}

#[test]
fn fuse_concatenates() {
    let mut t = Tape::<f32>::new();
    let v = t.constant(Tensor::from_slice(&[1, 2], &[1.0, 2.0]).unwrap());
    let q = t.constant(Tensor::from_slice(&[1, 1], &[3.0]).unwrap());
    let p = fuse(&mut t, v, q).unwrap();
    assert_eq!(t.value(p).data(), &[1.0, 2.0, 3.0]);
    let q2 = t.constant(Tensor::zeros(&[2, 4]));
    assert!(matches!(fuse(&mut t, v, q2), Err(Error::Shape { .. })));
    let v2 = t.constant(Tensor::zeros(&[2, 5]));
    let p2 = fuse(&mut t, v2, q2).unwrap();
    assert_eq!(t.shape(p2), &[2, 9]);
}

#[test]
fn fused_gradient_splits_into_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let v = Tensor::<f64>::from_fn(&[3, 2], |_| rng.random_range(-1.0..1.0));
    let q = Tensor::<f64>::from_fn(&[3, 4], |_| rng.random_range(-1.0..1.0));
    let w = Tensor::<f64>::from_fn(&[6, 3], |_| rng.random_range(-1.0..1.0));
    let worst = gradient_check(
        |t, x| {
            let p = fuse(t, x[0], x[1])?;
            let wv = t.constant(w.clone());
            let y = t.matmul(p, wv)?;
            let y = t.tanh(y)?;
            t.sum(y)
        },
        &[v, q],
        1e-6,
    )
    .unwrap();
    assert!(worst < 1e-6, "{worst}");
}

#[test]
fn zero_classifier_gives_uniform_softmax() {
    let (store, m) = tiny_model(2, HeadInit::Zero);
    let (x, q) = fixed_inputs();
    let logits = m.answer_scores(&store, &x, &q).unwrap();
    assert_eq!(logits.shape(), &[2, ANSWERS]);
    let r = evaluate_logits(&logits, &[0, 1], &[0, 1]).unwrap();
    for rec in &r.records {
        assert!((rec.confidence - 1.0 / 3.0).abs() < 1e-6);
    }
}

#[test]
fn answer_scores_are_deterministic_and_golden() {
    let (store, m) = tiny_model(7, HeadInit::Kaiming);
    let (x, q) = fixed_inputs();
    let a = m.answer_scores(&store, &x, &q).unwrap();
    let b = m.answer_scores(&store, &x, &q).unwrap();
    assert!(a.bit_eq(&b));
    let golden: Vec<f32> = include_str!("fixtures/golden_logits.txt")
        .split_whitespace()
        .map(|w| w.parse().unwrap())
        .collect();
    assert_eq!(golden.len(), 6);
    for (g, v) in golden.iter().zip(a.data()) {
        assert!((g - v).abs() < 1e-5, "{g} vs {v}");
    }
}

#[test]
fn cross_entropy_cases() {
    let mut t = Tape::<f64>::new();
    let target = one_hot::<f64>(&[2, 0], 3).unwrap();
    let uniform = t.constant(Tensor::zeros(&[2, 3]));
    let l = cross_entropy(&mut t, uniform, &target).unwrap();
    assert!((t.value(l).data()[0] - 3f64.ln()).abs() < 1e-12);
    assert!((3f64.ln() - 1.0986).abs() < 1e-4);
    let sharp = t.constant(Tensor::from_slice(&[2, 3], &[0.0, 0.0, 60.0, 60.0, 0.0, 0.0]).unwrap());
    let l = cross_entropy(&mut t, sharp, &target).unwrap();
    assert!(t.value(l).data()[0] < 1e-20);
    let bad = Tensor::from_slice(&[1, 3], &[1.0, 1.0, 0.0]).unwrap();
    let z = t.constant(Tensor::zeros(&[1, 3]));
    assert!(cross_entropy(&mut t, z, &bad).is_err());
    let soft = Tensor::from_slice(&[1, 3], &[0.5, 0.5, 0.0]).unwrap();
    assert!(cross_entropy(&mut t, z, &soft).is_err());
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_target() {
    let y = Tensor::<f64>::from_slice(&[2, 3], &[0.3, -1.0, 2.0, 0.1, 0.4, -0.7]).unwrap();
    let target = one_hot::<f64>(&[1, 2], 3).unwrap();
    let mut t = Tape::<f64>::new();
    let v = t.leaf(y.clone());
    let l = cross_entropy(&mut t, v, &target).unwrap();
    let g = t.backward(l).unwrap().take(v).unwrap();
    for (r, row) in y.data().chunks(3).enumerate() {
        let z: f64 = row.iter().map(|a| a.exp()).sum();
        for k in 0..3 {
            let expect = (row[k].exp() / z - target.data()[r * 3 + k]) / 2.0;
            assert!((g.data()[r * 3 + k] - expect).abs() < 1e-12);
        }
    }
    let worst = gradient_check(|t, x| cross_entropy(t, x[0], &target), &[y], 1e-6).unwrap();
    assert!(worst < 1e-6);
}

#[test]
fn early_stopping_on_injected_sequences() {
    let mut s = EarlyStopper::new(1);
    assert!(!s.observe(1, 0.9).stop);
    assert!(s.observe(2, 0.8).stop);
    assert_eq!(s.best_epoch, 1);

    let seq = [0.4, 0.6, 0.55, 0.7, 0.69, 0.68, 0.65, 0.71];
    let mut s = EarlyStopper::new(3);
    let mut stopped = None;
    for (i, &m) in seq.iter().enumerate() {
        if s.observe(i + 1, m).stop {
            stopped = Some(i + 1);
            break;
        }
    }
    assert_eq!(stopped, Some(7));
    assert_eq!(s.best_epoch, 4);
    assert_eq!(s.best, Some(0.7));
}

#[test]
fn frozen_encoder_is_bit_identical() {
    let (mut store, m) = tiny_model(3, HeadInit::Kaiming);
    let before = store.clone();
    let mut adam = AdamState::new(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut train = blank_set(SplitKind::Train, 0.01);
    train.images = Tensor::from_fn(train.images.shape(), |_| rng.random_range(-1.0..1.0));
    let val = train.clone();
    let cfg = VqaTrainConfig {
        epochs: 3,
        batch_size: 8,
        finetune_encoder: false,
        ..VqaTrainConfig::default()
    };
    train_vqa(&m, &mut store, &mut adam, &train, &val, &cfg, &mut rng, |_, _| {}).unwrap();
    let mut changed = false;
    for id in store.ids() {
        let same = before.get(id).bit_eq(store.get(id));
        if store.name(id).starts_with("enc.") {
            assert!(same, "{}", store.name(id));
        } else {
            changed |= !same;
        }
    }
    assert!(changed);
}

#[test]
fn empty_training_split_is_an_error() {
    let (mut store, m) = tiny_model(3, HeadInit::Kaiming);
    let mut adam = AdamState::new(&store);
    let val = blank_set(SplitKind::Validation, 0.01);
    let empty = val.subset(&[]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = train_vqa(&m, &mut store, &mut adam, &empty, &val, &VqaTrainConfig::default(), &mut rng, |_, _| {});
    assert!(r.is_err());
    let cfg = VqaTrainConfig {
        patience: 0,
        ..VqaTrainConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn training_restores_best_validation_epoch() {
    let (mut store, m) = tiny_model(4, HeadInit::Kaiming);
    let mut adam = AdamState::new(&store);
    let train = blank_set(SplitKind::Train, 0.02);
    let val = blank_set(SplitKind::Validation, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = VqaTrainConfig {
        epochs: 6,
        batch_size: 16,
        lr: 3e-3,
        patience: 2,
        ..VqaTrainConfig::default()
    };
    let out = train_vqa(&m, &mut store, &mut adam, &train, &val, &cfg, &mut rng, |_, _| {}).unwrap();
    let best = out.history.iter().map(|r| r.val_accuracy).fold(0.0, f64::max);
    assert_eq!(out.best_val_accuracy, best);
    let report = evaluate(&m, &store, &val).unwrap();
    assert!((report.accuracy - best).abs() < 1e-12);
}

#[test]
fn questions_alone_fit_training_but_not_test_combinations() {
    // Blank images leave only the question; in training each color names
    // exactly one shape, and the test split swaps them.
    let (mut store, m) = tiny_model(5, HeadInit::Kaiming);
    let mut adam = AdamState::new(&store);
    let train = blank_set(SplitKind::Train, 0.05);
    let test = blank_set(SplitKind::Test, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = VqaTrainConfig {
        epochs: 40,
        batch_size: 16,
        lr: 1e-2,
        patience: 40,
        finetune_encoder: false,
    };
    train_vqa(&m, &mut store, &mut adam, &train, &train.clone(), &cfg, &mut rng, |_, _| {}).unwrap();
    let tr = evaluate(&m, &store, &train).unwrap();
    let te = evaluate(&m, &store, &test).unwrap();
    assert!(tr.accuracy > 0.9, "train {}", tr.accuracy);
    assert!(te.accuracy < 1.0 / 3.0 + 0.05, "test {}", te.accuracy);
}

#[test]
fn evaluation_of_oracle_and_constant_predictors() {
    let answers: Vec<usize> = (0..300).map(|i| i % 3).collect();
    let ids: Vec<usize> = (0..300).collect();
    let oracle = Tensor::from_fn(&[300, 3], |i| if i % 3 == answers[i / 3] { 5.0 } else { 0.0 });
    let r = evaluate_logits(&oracle, &answers, &ids).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert!(r.per_shape.iter().all(|s| s.accuracy() == Some(1.0)));
    let constant = Tensor::from_fn(&[300, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
    let r = evaluate_logits(&constant, &answers, &ids).unwrap();
    assert!((r.accuracy * 100.0 - 33.34).abs() < 0.01);
}

#[test]
fn ece_cases() {
    assert_eq!(ece(&[1.0; 4], &[true; 4], 10).unwrap(), 0.0);
    assert_eq!(ece(&[1.0; 4], &[false; 4], 10).unwrap(), 1.0);
    let e = ece(&[0.9, 0.8, 0.3, 0.2], &[true, false, true, true], 2).unwrap();
    assert!((e - 0.55).abs() < 1e-12);
    assert!(ece(&[], &[], 10).is_err());
    assert!(ece(&[1.2], &[true], 10).is_err());
    // Right-closed bins: 0.5 belongs to the lower half, 0 to the first bin.
    let bins = calibration_bins(&[0.5, 0.0, 0.51], &[true, true, true], 2).unwrap();
    assert_eq!(bins.iter().map(|b| b.count).collect::<Vec<_>>(), [2, 1]);
}

#[test]
fn calibrated_fixture_has_zero_ece() {
    let mut conf = Vec::new();
    let mut hit = Vec::new();
    for (c, k) in [(0.35, 20), (0.6, 10), (0.95, 20)] {
        let right = (c * k as f64).round() as usize;
        for i in 0..k {
            conf.push(c);
            hit.push(i < right);
        }
    }
    assert!(ece(&conf, &hit, 10).unwrap() < 1e-12);
}

proptest! {
    #[test]
    fn report_invariants(
        rows in prop::collection::vec((prop::array::uniform3(-3.0f32..3.0), 0usize..3), 1..40),
        shift in -50.0f32..50.0,
    ) {
        let n = rows.len();
        let flat: Vec<f32> = rows.iter().flat_map(|(r, _)| r.to_vec()).collect();
        let answers: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let ids: Vec<usize> = (0..n).collect();
        let logits = Tensor::from_slice(&[n, 3], &flat).unwrap();
        let a = evaluate_logits(&logits, &answers, &ids).unwrap();
        let shifted = logits.map(|v| v + shift);
        let b = evaluate_logits(&shifted, &answers, &ids).unwrap();
        let pa: Vec<usize> = a.records.iter().map(|r| r.predicted).collect();
        let pb: Vec<usize> = b.records.iter().map(|r| r.predicted).collect();
        prop_assert_eq!(pa, pb);
        let weighted: f64 = a.per_shape.iter().filter_map(|s| s.accuracy().map(|x| x * s.count as f64)).sum::<f64>() / n as f64;
        prop_assert!((weighted - a.accuracy).abs() < 1e-6);
        prop_assert!((0.0..=1.0).contains(&a.ece));
        let total: usize = calibration_bins(&a.records.iter().map(|r| r.confidence).collect::<Vec<_>>(), &a.records.iter().map(|r| r.correct).collect::<Vec<_>>(), 10).unwrap().iter().map(|b| b.count).sum();
        prop_assert_eq!(total, n);
    }
}
