use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{check_inputs, project};

fn t(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(rows).unwrap()
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn named(list: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
    list.into_iter().enumerate().map(|(i, t)| (format!("input{i}"), t)).collect()
}

/// Largest norm-wise relative error over all checked inputs.
fn worst(results: &[crate::gradcheck::GradCheckResult]) -> f64 {
    results.iter().map(|r| r.norm_rel_error).fold(0.0, f64::max)
}

fn worst_elementwise(results: &[crate::gradcheck::GradCheckResult]) -> f64 {
    results.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
}

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.constant(t(&[&[1.0, 0.0], &[0.0, 0.0]]));
    let col = tape.constant(t(&[&[5.0], &[7.0]]));
    let out = tape.matmul(p, col).unwrap();
    assert_eq!(tape.value(out).data(), &[5.0, 0.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let inputs = named(vec![randn(&[3, 4], 1), randn(&[4, 2], 2)]);
    let res = check_inputs(&inputs, |tape, v| {
        let out = tape.matmul(v[0], v[1])?;
        project(tape, out, 9)
    })
    .unwrap();
    assert!(worst_elementwise(&res) < 1e-6, "{res:?}");
}

#[test]
fn softmax_rows_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[&[0.0, 0.0]]));
    let y = tape.softmax_rows(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(t(&[&[1.0, 1.0, 1.0]]));
    let y = tape.softmax_rows(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    // Shifted by the row max: [0, -1000] -> exp(-1000) underflows to 0.
    let x = tape.constant(t(&[&[1000.0, 0.0]]));
    let y = tape.softmax_rows(x).unwrap();
    let expect_small = (-1000.0f64).exp() / (1.0 + (-1000.0f64).exp());
    assert_eq!(tape.value(y).data()[0], 1.0);
    assert!((tape.value(y).data()[1] - expect_small).abs() < 1e-300);
    assert!(tape.value(y).all_finite());
}

#[test]
fn softmax_rejects_non_finite() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[&[f64::NAN, 0.0]]));
    assert!(matches!(tape.softmax_rows(x), Err(Error::Numeric(_))));
}

#[test]
fn layer_norm_examples() {
    let mut tape = Tape::<f64>::new();
    let gamma = tape.constant(Tensor::ones(&[3]));
    let beta = tape.constant(Tensor::zeros(&[3]));
    let x = tape.constant(t(&[&[4.0, 4.0, 4.0]]));
    let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let gamma = tape.constant(Tensor::ones(&[2]));
    let beta = tape.constant(Tensor::zeros(&[2]));
    let x = tape.constant(t(&[&[1.0, -1.0]]));
    let y = tape.layer_norm(x, gamma, beta, 1e-14).unwrap();
    let out = tape.value(y).data();
    assert!((out[0] - 1.0).abs() < 1e-12 && (out[1] + 1.0).abs() < 1e-12);
}

#[test]
fn layer_norm_row_statistics() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn(&[4, 8], 3).map(|v| 3.0 * v + 1.5));
    let gamma = tape.constant(Tensor::ones(&[8]));
    let beta = tape.constant(Tensor::zeros(&[8]));
    let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
    let out = tape.value(y);
    for i in 0..4 {
        let row = out.row(i);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-7, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-5, "var {var}");
    }
}

#[test]
fn pointwise_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[&[0.0, -3.0, 3.0]]));
    let g = tape.gelu(x, GeluKind::Tanh);
    assert_eq!(tape.value(g).data()[0], 0.0);
    let g = tape.gelu(x, GeluKind::Erf);
    assert_eq!(tape.value(g).data()[0], 0.0);
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 0.0, 3.0]);

    let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap());
    let c = tape.concat_cols(&[a, b]).unwrap();
    assert_eq!(tape.value(c).shape(), &[2, 3]);
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);

    let bad = tape.constant(Tensor::zeros(&[3, 1]));
    assert!(tape.concat_cols(&[a, bad]).is_err());
    assert!(tape.add(a, b).is_err());
}

#[test]
fn gelu_tanh_matches_closed_form() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[&[1.0, -0.5]]));
    let g = tape.gelu(x, GeluKind::Tanh);
    for (&xv, &gv) in [1.0f64, -0.5].iter().zip(tape.value(g).data()) {
        let expect = 0.5 * xv * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (xv + 0.044715 * xv.powi(3))).tanh());
        assert!((gv - expect).abs() < 1e-15);
    }
}

#[test]
fn dropout_identity_cases_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(randn(&[4, 4], 5));
    assert_eq!(tape.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(tape.dropout(x, 0.7, false, &mut rng).unwrap(), x);
    assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
    assert!(matches!(tape.dropout(x, -0.1, true, &mut rng), Err(Error::Config(_))));
}

#[test]
fn dropout_survival_fraction_and_scaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::ones(&[100, 100]));
    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let out = tape.value(y).data();
    let kept = out.iter().filter(|&&v| v != 0.0).count() as f64 / 1e4;
    assert!((kept - 0.5).abs() < 0.02, "kept {kept}");
    assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
}

#[test]
fn dropout_is_deterministic_under_seed() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[8, 8]));
        let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(), run());
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::<f64>::new();
    let logits = tape.constant(t(&[&[0.0, 0.0]]));
    let loss = tape.cross_entropy(logits, &[0]).unwrap();
    assert!((tape.value(loss).item() - std::f64::consts::LN_2).abs() < 1e-12);

    let logits = tape.constant(t(&[&[20.0, 0.0], &[0.0, 20.0]]));
    let loss = tape.cross_entropy(logits, &[0, 1]).unwrap();
    assert!(tape.value(loss).item() < 1e-3);

    assert!(matches!(tape.cross_entropy(logits, &[0, 2]), Err(Error::Data(_))));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let inputs = named(vec![randn(&[3, 4], 4)]);
    let res = check_inputs(&inputs, |tape, v| tape.cross_entropy(v[0], &[1, 3, 0])).unwrap();
    assert!(worst_elementwise(&res) < 1e-6, "{res:?}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(randn(&[3, 5], 6));
    let loss = tape.sum(x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[3, 5]));
}

#[test]
fn backward_of_square() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[1], &[3.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn second_backward_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[2]));
    let loss = tape.sum(x);
    tape.backward(loss).unwrap();
    assert!(matches!(tape.backward(loss), Err(Error::Autodiff(_))));
}

#[test]
fn non_scalar_loss_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[2, 2]));
    assert!(matches!(tape.backward(x), Err(Error::Autodiff(_))));
}

#[test]
fn diamond_accumulates_both_paths() {
    // loss = sum(2x + x*x) -> grad = 2 + 2x
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
    let a = tape.scale(x, 2.0);
    let b = tape.mul(x, x).unwrap();
    let s = tape.add(a, b).unwrap();
    let loss = tape.sum(s);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[4.0, -2.0, 3.0]);
    assert_eq!(grads.ops_visited(), 4);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[2, 3]));
    let unused = tape.param(Tensor::ones(&[4]));
    let loss = tape.sum(x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[4]));
}

#[test]
fn injected_fault_flips_gradient_sign() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones(&[2]));
    let y = tape.scale(x, 3.0);
    let loss = tape.sum(y);
    inject_backward_fault(Some("scale"));
    let grads = tape.backward(loss);
    inject_backward_fault(None);
    assert_eq!(grads.unwrap().get(x).unwrap().data(), &[-3.0, -3.0]);
}

#[test]
fn attention_single_node_returns_value() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(randn(&[1, 4], 1));
    let k = tape.constant(randn(&[1, 4], 2));
    let v = tape.constant(randn(&[1, 6], 3));
    let blocks: Arc<[usize]> = vec![0, 1].into();
    let out = tape.attention(q, k, v, 2, &blocks, None).unwrap();
    assert_eq!(tape.value(out), tape.value(v));
}

#[test]
fn attention_weights_are_block_stochastic() {
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(randn(&[7, 6], 1));
    let k = tape.constant(randn(&[7, 6], 2));
    let v = tape.constant(randn(&[7, 6], 3));
    let blocks: Arc<[usize]> = vec![0, 3, 4, 7].into();
    let out = tape.attention(q, k, v, 3, &blocks, None).unwrap();
    for h in 0..3 {
        let w = tape.attention_weights(out, h).unwrap();
        for i in 0..7 {
            let b = blocks.windows(2).position(|s| i >= s[0] && i < s[1]).unwrap();
            let (s, e) = (blocks[b], blocks[b + 1]);
            let inside: f64 = (s..e).map(|j| w.get(i, j)).sum();
            assert!((inside - 1.0).abs() < 1e-12);
            for j in (0..7).filter(|j| *j < s || *j >= e) {
                assert_eq!(w.get(i, j), 0.0);
            }
        }
    }
}

#[test]
fn attention_dropout_is_identity_at_zero_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(randn(&[5, 4], 1));
    let k = tape.constant(randn(&[5, 4], 2));
    let v = tape.constant(randn(&[5, 4], 3));
    let blocks: Arc<[usize]> = vec![0, 5].into();
    let plain = tape.attention(q, k, v, 2, &blocks, None).unwrap();
    let dropped = tape.attention(q, k, v, 2, &blocks, Some((0.0, &mut rng))).unwrap();
    assert_eq!(tape.value(plain), tape.value(dropped));
}

fn sparse_chain(n: usize) -> Arc<SparseMatrix<f64>> {
    let mut trip = Vec::new();
    for i in 0..n {
        trip.push((i, i, 0.5));
        if i + 1 < n {
            trip.push((i, i + 1, 0.3));
            trip.push((i + 1, i, 0.2));
        }
    }
    Arc::new(SparseMatrix::from_triplets(n, n, trip).unwrap())
}

/// Every differentiable op, checked at rel. err < 1e-5 on random inputs.
#[test]
fn every_op_passes_gradient_check() {
    type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>>;
    let a_hat = sparse_chain(5);
    let blocks: Arc<[usize]> = vec![0, 2, 5].into();
    let blocks2 = Arc::clone(&blocks);
    let cases: Vec<(&str, Vec<Tensor<f64>>, Build)> = vec![
        ("matmul", vec![randn(&[3, 4], 1), randn(&[4, 5], 2)], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("propagate", vec![randn(&[5, 3], 3)], Box::new(move |t, v| t.propagate(&a_hat, v[0], 3))),
        ("add", vec![randn(&[3, 4], 4), randn(&[3, 4], 5)], Box::new(|t, v| t.add(v[0], v[1]))),
        ("add_row", vec![randn(&[3, 4], 6), randn(&[4], 7)], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul", vec![randn(&[3, 4], 8), randn(&[3, 4], 9)], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("scale", vec![randn(&[2, 3], 10)], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))),
        ("gelu_tanh", vec![randn(&[3, 4], 11)], Box::new(|t, v| Ok(t.gelu(v[0], GeluKind::Tanh)))),
        ("gelu_erf", vec![randn(&[3, 4], 12)], Box::new(|t, v| Ok(t.gelu(v[0], GeluKind::Erf)))),
        ("tanh", vec![randn(&[3, 4], 13)], Box::new(|t, v| Ok(t.tanh(v[0])))),
        ("softmax_rows", vec![randn(&[3, 5], 14)], Box::new(|t, v| t.softmax_rows(v[0]))),
        (
            "layer_norm",
            vec![randn(&[4, 6], 15), randn(&[6], 16), randn(&[6], 17)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("concat_cols", vec![randn(&[3, 2], 18), randn(&[3, 4], 19)], Box::new(|t, v| t.concat_cols(&[v[0], v[1]]))),
        ("transpose", vec![randn(&[3, 5], 20)], Box::new(|t, v| Ok(t.transpose(v[0])))),
        ("mean_rows", vec![randn(&[4, 3], 21)], Box::new(|t, v| Ok(t.mean_rows(v[0])))),
        ("sum_rows", vec![randn(&[4, 3], 22)], Box::new(|t, v| Ok(t.sum_rows(v[0])))),
        (
            "segment_pool",
            vec![randn(&[5, 3], 23)],
            Box::new(move |t, v| t.segment_pool(v[0], &blocks, true)),
        ),
        (
            "weighted_sum",
            vec![randn(&[4, 3], 24), randn(&[4, 2], 25), randn(&[4, 2], 26), randn(&[4, 2], 27)],
            Box::new(|t, v| t.weighted_sum(v[0], &v[1..])),
        ),
        (
            "attention",
            vec![randn(&[5, 6], 28), randn(&[5, 6], 29), randn(&[5, 4], 30)],
            Box::new(move |t, v| t.attention(v[0], v[1], v[2], 2, &blocks2, None)),
        ),
    ];
    for (name, inputs, build) in cases {
        let res = check_inputs(&named(inputs), |t, v| {
            let out = build(t, v)?;
            project(t, out, 77)
        })
        .unwrap();
        assert!(worst(&res) < 1e-5, "{name}: {res:?}");
    }
}

#[test]
fn attention_with_dropout_gradient_is_exact_for_fixed_mask() {
    // The dropout mask is drawn from the same seed on every evaluation, so the
    // function is deterministic and differentiable.
    let blocks: Arc<[usize]> = vec![0, 4].into();
    let inputs = named(vec![randn(&[4, 4], 1), randn(&[4, 4], 2), randn(&[4, 4], 3)]);
    let res = check_inputs(&inputs, |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let out = t.attention(v[0], v[1], v[2], 2, &blocks, Some((0.3, &mut rng)))?;
        project(t, out, 3)
    })
    .unwrap();
    assert!(worst(&res) < 1e-5, "{res:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>(), scale in 0.1f64..50.0) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(randn(&[rows, cols], seed).map(|v| v * scale));
        let y = tape.softmax_rows(x).unwrap();
        for i in 0..rows {
            let s: f64 = tape.value(y).row(i).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn matmul_and_layer_norm_gradients(n in 1usize..8, k in 1usize..8, m in 1usize..8, seed in any::<u64>()) {
        let inputs = named(vec![randn(&[n, k], seed), randn(&[k, m], seed ^ 1)]);
        let res = check_inputs(&inputs, |t, v| {
            let out = t.matmul(v[0], v[1])?;
            project(t, out, seed)
        }).unwrap();
        prop_assert!(worst(&res) < 1e-5, "{:?}", res);

        if k > 1 {
            let inputs = named(vec![randn(&[n, k], seed ^ 2), randn(&[k], seed ^ 3), randn(&[k], seed ^ 4)]);
            let res = check_inputs(&inputs, |t, v| {
                let out = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(t, out, seed)
            }).unwrap();
            prop_assert!(worst(&res) < 1e-5, "{:?}", res);
        }
    }
}
