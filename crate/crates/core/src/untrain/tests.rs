use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{synth_dataset, SynthSpec};
use crate::models::{ArchSpec, Model};
use crate::tensor::Tensor;
use crate::wf::{wf_wrap, LayerSelection};

const ONE_MINUS_SIGMOID_3: f64 = 0.04742587317756678;

fn splits() -> crate::data::SynthSplits {
    synth_dataset(&SynthSpec {
        n_classes: 4,
        train_per_class: 16,
        val_per_class: 8,
        test_per_class: 8,
        image_size: 8,
        seed: 3,
    })
    .unwrap()
}

fn model(arch: ArchId) -> WfModel {
    wf_wrap(Model::new(ArchSpec::new(arch, 4, 8).unwrap(), 11).unwrap(), &LayerSelection::Default).unwrap()
}

fn small_cfg() -> UntrainConfig {
    UntrainConfig {
        batch_size: 8,
        accumulation_steps: 2,
        patience: 3,
        validations_per_epoch: 2,
        max_epochs: 3,
        learning_rate: 10.0,
        ..Default::default()
    }
}

fn set_layer(m: &mut WfModel, layer: usize, value: f64) {
    let l = m.layers()[layer].clone();
    for p in [l.gate_weights.param, l.gate_biases.param] {
        m.store_mut().value_mut(p).iter_mut().for_each(|v| *v = value);
    }
}

#[test]
fn regularizer_reference_values() {
    let mut m = model(ArchId::SmallCnn);
    assert!((regularizer(&m) - ONE_MINUS_SIGMOID_3).abs() < 1e-12);
    set_layer(&mut m, 0, 0.0);
    set_layer(&mut m, 1, 0.0);
    assert!((regularizer(&m) - 0.5).abs() < 1e-12);
    set_layer(&mut m, 0, 3.0);
    set_layer(&mut m, 1, -3.0);
    assert!((regularizer(&m) - 0.5).abs() < 1e-12);
}

#[test]
fn regularizer_on_tape_matches_direct_value() {
    let data = splits().train;
    let mut m = model(ArchId::SmallCnn);
    set_layer(&mut m, 1, -1.25);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let parts = BatchParts::from_batch(&data, &[0, 1, 2, 3], 4, 3, &mut rng).unwrap();
    let mut tape = Tape::new();
    let (_, report) = batch_loss(&m, m.store(), &mut tape, &parts, &UntrainConfig::default()).unwrap();
    assert!((report.r - regularizer(&m)).abs() < 1e-12);
}

#[test]
fn composite_and_difference_values() {
    let cfg = UntrainConfig::default();
    assert!((composite_loss(0.1, 10.0, 0.05, &cfg).unwrap() - 1.15).abs() < 1e-6);
    assert!((difference_loss(0.1, 0.2, 0.0, &cfg).unwrap() + 1.9).abs() < 1e-12);
    let v = composite_loss(0.0, 0.0, 0.0, &cfg).unwrap();
    assert!(v.is_finite() && (v - 1e9).abs() < 1.0);
    assert!(matches!(composite_loss(f64::NAN, 1.0, 0.0, &cfg), Err(Error::NonFinite { .. })));
}

#[test]
fn batch_terms_match_independent_forwards() {
    let data = splits().train;
    let m = model(ArchId::SmallCnn);
    let cfg = UntrainConfig::default();
    let batch = [5, 9, 14, 30, 2, 41];
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let parts = BatchParts::from_batch(&data, &batch, 4, 3, &mut rng).unwrap();
    assert_eq!(parts.forget_labels.len(), 3);
    assert_eq!(parts.retain_rows.len(), 9);
    let mut tape = Tape::new();
    let (_, report) = batch_loss(&m, m.store(), &mut tape, &parts, &cfg).unwrap();

    let s_u = forget_loss(&m, &parts.forget_images, &parts.forget_labels).unwrap();
    let copies = Tensor::concat_rows(&[&parts.retain_images, &parts.retain_images, &parts.retain_images]).unwrap();
    let labels: Vec<usize> = (0..3).flat_map(|_| parts.retain_labels.clone()).collect();
    let logits = m.logits_per_row(&copies, &parts.retain_rows).unwrap();
    let s_r = crate::models::mean_cross_entropy(&logits, &labels);
    assert!((report.s_u - s_u).abs() < 1e-12);
    assert!((report.s_r - s_r).abs() < 1e-12);
    let expected = composite_loss(s_r, s_u, regularizer(&m), &cfg).unwrap();
    assert!((report.l - expected).abs() < 1e-9);
}

#[test]
fn odd_and_tiny_batches() {
    let data = splits().train;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(BatchParts::from_batch(&data, &[0, 1, 2], 4, 3, &mut rng), Err(Error::OddBatch(3))));
    let parts = BatchParts::from_batch(&data, &[7, 8], 4, 3, &mut rng).unwrap();
    assert_eq!(parts.forget_labels, vec![data.labels()[7]]);
    assert_eq!(parts.retain_labels, vec![data.labels()[8]]);
    let m = model(ArchId::SmallCnn);
    let mut tape = Tape::new();
    assert!(batch_loss(&m, m.store(), &mut tape, &parts, &UntrainConfig::default()).is_ok());
    assert!(matches!(
        UntrainConfig { batch_size: 7, ..Default::default() }.validate(),
        Err(Error::OddBatch(7))
    ));
}

#[test]
fn retain_rows_are_reproducible_and_cover_all_classes() {
    let a = draw_retain_rows(&mut ChaCha8Rng::seed_from_u64(9), 5, 64, 3);
    let b = draw_retain_rows(&mut ChaCha8Rng::seed_from_u64(9), 5, 64, 3);
    assert_eq!(a, b);
    assert_eq!(a.len(), 192);
    for c in 0..5 {
        assert!(a.contains(&c));
    }
}

#[test]
fn zero_learning_rate_keeps_gates_and_base_is_frozen() {
    let s = splits();
    let mut m = model(ArchId::SmallCnn);
    let before_alpha = m.alpha_snapshot();
    let base_ids: Vec<_> = m.base().store().ids().filter(|&id| !m.alphas().any(|a| a.param == id)).collect();
    let before_base: Vec<Tensor> = base_ids.iter().map(|&id| m.store().value(id).clone()).collect();
    let cfg = UntrainConfig { learning_rate: 0.0, max_epochs: 1, ..small_cfg() };
    untrain(&mut m, &s.train, &s.val, &cfg).unwrap();
    assert_eq!(m.alpha_snapshot(), before_alpha);

    let cfg = small_cfg();
    untrain(&mut m, &s.train, &s.val, &cfg).unwrap();
    assert_ne!(m.alpha_snapshot(), before_alpha);
    for (id, before) in base_ids.iter().zip(&before_base) {
        assert_eq!(m.store().value(*id), before);
    }
}

#[test]
fn accumulated_gradients_equal_merged_batch_gradient() {
    let data = splits().train;
    let cfg = UntrainConfig { loss_mode: LossMode::Difference, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let batches = [vec![0, 1, 2, 3, 4, 5], vec![10, 11, 12, 13, 14, 15], vec![20, 33, 47, 50, 61, 62]];
    let parts: Vec<BatchParts> =
        batches.iter().map(|b| BatchParts::from_batch(&data, b, 4, 3, &mut rng).unwrap()).collect();

    let mut accumulated = model(ArchId::SmallCnn);
    accumulated.store_mut().zero_grads();
    for p in &parts {
        let mut tape = Tape::new();
        let (l, _) = batch_loss(&accumulated, accumulated.store(), &mut tape, p, &cfg).unwrap();
        tape.backward(l, accumulated.store_mut()).unwrap();
    }
    accumulated.store_mut().sgd_step(0.5, 1.0 / parts.len() as f64);

    let mut merged = model(ArchId::SmallCnn);
    merged.store_mut().zero_grads();
    let all = BatchParts::concat(&parts).unwrap();
    let mut tape = Tape::new();
    let (l, _) = batch_loss(&merged, merged.store(), &mut tape, &all, &cfg).unwrap();
    tape.backward(l, merged.store_mut()).unwrap();
    merged.store_mut().sgd_step(0.5, 1.0);

    for (a, b) in accumulated.alpha_snapshot().iter().zip(merged.alpha_snapshot()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }
}

#[test]
fn best_gates_are_restored() {
    let s = splits();
    let mut m = model(ArchId::SmallCnn);
    let cfg = UntrainConfig { learning_rate: 200.0, patience: 2, ..small_cfg() };
    let out = untrain(&mut m, &s.train, &s.val, &cfg).unwrap();
    let min = out.history.iter().map(|h| h.val_l).fold(f64::INFINITY, f64::min);
    assert_eq!(out.best_val_loss, min);
    let now = validation_loss(&m, &s.val, &cfg).unwrap();
    assert!((now - out.best_val_loss).abs() < 1e-12, "{now} vs {}", out.best_val_loss);
    assert!(out.history.iter().any(|h| h.step == out.best_step));
    for a in m.alphas() {
        assert!(a.raw(m.store()).data().iter().all(|v| (-3.0..=3.0).contains(v)));
    }
}

#[test]
fn untraining_is_deterministic() {
    let s = splits();
    let run = || {
        let mut m = model(ArchId::SmallCnn);
        let out = untrain(&mut m, &s.train, &s.val, &small_cfg()).unwrap();
        (out.history, m.alpha_snapshot())
    };
    assert_eq!(run(), run());
}

#[test]
fn difference_mode_goes_negative() {
    let s = splits();
    let mut m = model(ArchId::SmallCnn);
    let cfg = UntrainConfig { loss_mode: LossMode::Difference, ..small_cfg() };
    let out = untrain(&mut m, &s.train, &s.val, &cfg).unwrap();
    assert!(out.best_val_loss < 0.0);
}

#[test]
fn logit_target_starts_near_zero_retain_distance() {
    let data = splits().train;
    let m = model(ArchId::TinyVit);
    let cfg = UntrainConfig { loss_mode: LossMode::LogitTarget, ..Default::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let parts = BatchParts::from_batch(&data, &[0, 1, 2, 3], 4, 3, &mut rng).unwrap();
    let mut tape = Tape::new();
    let (_, report) = batch_loss(&m, m.store(), &mut tape, &parts, &cfg).unwrap();
    // With all gates at σ(3) the gated logits differ from the ungated ones by a small amount.
    assert!(report.s_r > 0.0 && report.s_r < 1.0);
    assert!(report.s_u > 0.0 && report.s_u < 1.0);
}

#[test]
fn history_is_written_as_json_lines() {
    let s = splits();
    let mut m = model(ArchId::SmallCnn);
    let out = untrain(&mut m, &s.train, &s.val, &small_cfg()).unwrap();
    let mut buf = Vec::new();
    write_history_jsonl(&mut buf, &out.history).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), out.history.len());
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["step", "epoch", "S_r", "S_u", "R", "L", "val_l"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
}

#[test]
fn config_validation_and_toml_roundtrip() {
    assert!(UntrainConfig::default().validate().is_ok());
    assert_eq!(UntrainConfig::for_arch(ArchId::TinyVit).lambda1, 100.0);
    assert!(UntrainConfig { expansion: 0, ..Default::default() }.validate().is_err());
    assert!(UntrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
    let parsed: UntrainConfig = toml::from_str("lambda1 = 5.0\nloss_mode = \"difference\"").unwrap();
    assert_eq!(parsed.lambda1, 5.0);
    assert_eq!(parsed.loss_mode, LossMode::Difference);
    assert!(toml::from_str::<UntrainConfig>("lamda1 = 5.0").is_err());
}
