use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;
use crate::tensor::Tensor;

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

#[test]
fn conv_identity_kernel_reproduces_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[1, 1, 4, 5], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap());
    let y = tape.conv2d(xv, k, 1, 0).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv_output_shape_with_padding() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 8, 8]));
    let k = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let y = tape.conv2d(x, k, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[2, 4, 8, 8]);
    let y2 = tape.conv2d(x, k, 2, 0).unwrap();
    assert_eq!(tape.shape(y2), &[2, 4, 3, 3]);
}

#[test]
fn conv_matches_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
    let k = random(&[1, 1, 2, 2], -1.0, 1.0, &mut rng);
    let mut expected = [0.0; 4];
    for oy in 0..2 {
        for ox in 0..2 {
            let mut acc = 0.0;
            for ky in 0..2 {
                for kx in 0..2 {
                    acc += x.get(&[0, 0, oy + ky, ox + kx]) * k.get(&[0, 0, ky, kx]);
                }
            }
            expected[oy * 2 + ox] = acc;
        }
    }
    let mut tape = Tape::new();
    let (xv, kv) = (tape.constant(x), tape.constant(k));
    let y = tape.conv2d(xv, kv, 1, 0).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn conv_rejects_channel_mismatch_naming_the_dimension() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 5, 5]));
    let k = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
    let err = tape.conv2d(x, k, 1, 0).unwrap_err();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(err.to_string().contains("Cin"), "{err}");
    let k_big = tape.constant(Tensor::zeros(&[1, 2, 9, 3]));
    let err = tape.conv2d(x, k_big, 1, 1).unwrap_err();
    assert!(err.to_string().contains("kH"), "{err}");
}

#[test]
fn linear_identity_and_bias() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
    let w = tape.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let b0 = tape.constant(Tensor::zeros(&[2]));
    let b = tape.constant(Tensor::new(vec![2], vec![3.0, 3.0]).unwrap());
    let y0 = tape.linear(x, w, Some(b0)).unwrap();
    assert_eq!(tape.value(y0).data(), &[1.0, 2.0]);
    let y = tape.linear(x, w, Some(b)).unwrap();
    assert_eq!(tape.value(y).data(), &[4.0, 5.0]);
}

#[test]
fn linear_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 3], -1.0, 1.0, &mut rng);
    let w = random(&[3, 5], -1.0, 1.0, &mut rng);
    let b = random(&[5], -1.0, 1.0, &mut rng);
    let mut expected = vec![0.0; 20];
    for i in 0..4 {
        for j in 0..5 {
            let mut acc = b.data()[j];
            for k in 0..3 {
                acc += x.get(&[i, k]) * w.get(&[k, j]);
            }
            expected[i * 5 + j] = acc;
        }
    }
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x), tape.constant(w), tape.constant(b));
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    for (a, e) in tape.value(y).data().iter().zip(&expected) {
        assert!((a - e).abs() < 1e-13);
    }
    let bad = tape.constant(Tensor::zeros(&[4, 4]));
    assert!(tape.linear(bad, wv, None).is_err());
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::new();
    let uniform = tape.constant(Tensor::zeros(&[1, 10]));
    let l = tape.softmax_cross_entropy(uniform, &[7]).unwrap();
    assert!((tape.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);

    let peaked = tape.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
    let l = tape.softmax_cross_entropy(peaked, &[0]).unwrap();
    let v = tape.value(l).item().unwrap();
    assert!(v.is_finite() && v.abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let logits = random(&[3, 4], -2.0, 2.0, &mut rng);
    let labels = [2, 0, 3];
    let mut expected = 0.0;
    for (i, &lab) in labels.iter().enumerate() {
        let z: f64 = (0..4).map(|j| logits.get(&[i, j]).exp()).sum();
        expected += -(logits.get(&[i, lab]).exp() / z).ln();
    }
    expected /= 3.0;
    let lv = tape.constant(logits);
    let l = tape.softmax_cross_entropy(lv, &labels).unwrap();
    assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);

    assert!(matches!(
        tape.softmax_cross_entropy(lv, &[0, 4, 1]),
        Err(Error::LabelOutOfRange { label: 4, classes: 4 })
    ));
}

#[test]
fn sigmoid_reference_values() {
    assert_eq!(sigmoid(0.0), 0.5);
    let s3 = 1.0 / (1.0 + (-3.0f64).exp());
    assert!((sigmoid(3.0) - s3).abs() < 1e-15);
    assert!((sigmoid(3.0) - 0.952_574_126_822_433_4).abs() < 1e-15);
    assert!((sigmoid(-3.0) - (1.0 - s3)).abs() < 1e-15);
}

#[test]
fn backward_of_sum_is_all_ones() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap(), true);
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let loss = tape.sum(xv);
    tape.backward(loss, &mut store).unwrap();
    assert!(store.grad(x).data().iter().all(|&g| g == 1.0));
}

#[test]
fn frozen_parameter_accumulator_stays_zero() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::full(&[3], 2.0), false);
    let x = store.add("x", Tensor::full(&[3], 1.5), true);
    let mut tape = Tape::new();
    let (wv, xv) = (tape.param(&store, w), tape.param(&store, x));
    let p = tape.mul(wv, xv).unwrap();
    let loss = tape.sum(p);
    tape.backward(loss, &mut store).unwrap();
    assert!(store.grad(w).data().iter().all(|&g| g == 0.0));
    assert!(store.grad(x).data().iter().all(|&g| g == 2.0));

    let before = store.value(w).clone();
    for _ in 0..5 {
        store.sgd_step(10.0, 1.0);
    }
    assert_eq!(store.value(w), &before);
    assert_ne!(store.value(x).data()[0], 1.5);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::full(&[3], 1.0), true);
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let y = tape.relu(xv);
    assert!(matches!(tape.backward(y, &mut store), Err(Error::NonScalarLoss { .. })));
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[7, 11], -30.0, 30.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.softmax(xv).unwrap();
    for row in tape.value(y).data().chunks(11) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&[3, 2, 6, 6], -1.0, 1.0, &mut rng);
    let k = random(&[4, 2, 3, 3], -1.0, 1.0, &mut rng);
    let run = || {
        let mut tape = Tape::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv2d(xv, kv, 1, 1).unwrap();
        let y = tape.gelu(y);
        let y = tape.maxpool2d(y, 2).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn tape_records_inputs_before_outputs() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::full(&[2, 2], 1.0), true);
    let mut tape = Tape::new();
    let xv = tape.param(&store, x);
    let y = tape.sigmoid(xv);
    let z = tape.mul(y, xv).unwrap();
    let l = tape.mean(z).unwrap();
    for v in [y, z, l] {
        let (_, inputs) = tape.entry(v);
        assert!(inputs.iter().all(|i| i.id() < v.id()));
    }
    assert_eq!(tape.entry(l).0, "mean");
}

#[test]
fn elementwise_ops_reject_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[3, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
    assert!(tape.sub(a, b).is_err());
}

#[test]
fn grad_linear_cross_entropy_small() {
    // linear + cross-entropy on a 2x3 input
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[2, 3], -1.0, 1.0, &mut rng);
    let mut store = ParamStore::new();
    let w = store.add("w", random(&[3, 4], -1.0, 1.0, &mut rng), true);
    let b = store.add("b", random(&[4], -1.0, 1.0, &mut rng), true);
    let report = grad_check(&mut store, &[w, b], 1e-6, 100, 0, |tape, store| {
        let xv = tape.constant(x.clone());
        let (wv, bv) = (tape.param(store, w), tape.param(store, b));
        let y = tape.linear(xv, wv, Some(bv))?;
        tape.softmax_cross_entropy(y, &[1, 3])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
    assert_eq!(report.coords_checked, 16);
}

#[test]
fn grad_conv_pool_linear_stack() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[2, 1, 6, 6], 0.0, 1.0, &mut rng);
    let mut store = ParamStore::new();
    let k = store.add("k", random(&[3, 1, 3, 3], -0.5, 0.5, &mut rng), true);
    let kb = store.add("kb", random(&[3], -0.1, 0.1, &mut rng), true);
    let w = store.add("w", random(&[27, 4], -0.5, 0.5, &mut rng), true);
    let report = grad_check(&mut store, &[k, kb, w], 1e-6, 30, 1, |tape, store| {
        let xv = tape.constant(x.clone());
        let (kv, kbv, wv) = (tape.param(store, k), tape.param(store, kb), tape.param(store, w));
        let y = tape.conv2d(xv, kv, 1, 1)?;
        let y = tape.add_channel_bias(y, kbv)?;
        let y = tape.relu(y);
        let y = tape.maxpool2d(y, 2)?;
        let y = tape.reshape(y, &[2, 27])?;
        let y = tape.linear(y, wv, None)?;
        tape.softmax_cross_entropy(y, &[0, 2])
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-5, "{}", report.max_rel_error);
}

#[test]
fn grad_check_rejects_bad_eps_and_frozen() {
    let mut store = ParamStore::new();
    let x = store.add("x", Tensor::full(&[2], 1.0), false);
    let f = |tape: &mut Tape, s: &ParamStore| {
        let v = tape.param(s, x);
        Ok(tape.sum(v))
    };
    assert!(grad_check(&mut store, &[x], 1e-6, 4, 0, f).is_err());
    store.set_trainable(x, true);
    assert!(grad_check(&mut store, &[x], 1e-2, 4, 0, f).is_err());
    assert!(grad_check(&mut store, &[x], 1e-6, 4, 0, f).is_ok());
}
