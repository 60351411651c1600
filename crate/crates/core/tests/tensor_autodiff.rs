use std::sync::Arc;

use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::Rng;
use recgraph::autodiff::{dropout, finite_diff_check, NodeId, ParamStore, Tape};
use recgraph::rng::RngKey;
use recgraph::tensor::{self, Axis, Ids, Scalar, Shape, Tensor};
use recgraph::{Error, Result};

fn t(dims: &[(Axis, usize)], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(dims, data).unwrap()
}

fn random(dims: &[(Axis, usize)], key: RngKey, lo: f64, hi: f64) -> Tensor<f64> {
    let shape = Shape::new(dims).unwrap();
    let mut rng = key.rng();
    let data = (0..shape.numel()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Sums every element (masked Time positions excluded).
fn total(tape: &mut Tape<f64>, mut x: NodeId) -> Result<NodeId> {
    while let Some(&(axis, _)) = tape.value(x).shape().dims().first() {
        x = tape.reduce_sum(x, axis)?;
    }
    Ok(x)
}

/// Gradient check of `build` over the given leaves at `points` random draws.
/// The output is contracted with fixed random weights so every output
/// element gets a distinct upstream gradient.
fn grad_check<F>(name: &str, leaves: &[(&str, &[(Axis, usize)], f64, f64)], lens: Option<Vec<usize>>, points: u64, build: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut worst = 0.0f64;
    for point in 0..points {
        let mut store = ParamStore::new();
        for (leaf, dims, lo, hi) in leaves {
            let mut v = random(dims, RngKey::new(point, name).child(leaf), *lo, *hi);
            if let Some(l) = &lens {
                if v.shape().has(Axis::Batch) && v.shape().has(Axis::Time) {
                    v = v.with_seq_lens(l.clone()).unwrap();
                }
            }
            store.insert(leaf, v);
        }
        let names: Vec<String> = leaves.iter().map(|l| l.0.to_string()).collect();
        let err = finite_diff_check(
            |p, tape| {
                let ids: Vec<NodeId> = names.iter().map(|n| p.register(tape, n)).collect::<Result<_>>()?;
                let out = build(tape, &ids)?;
                let shape = tape.value(out).shape().clone();
                if shape.numel() == 1 {
                    return total(tape, out);
                }
                let w = random(shape.dims(), RngKey::new(point, "weights"), -1.0, 1.0);
                let w = tape.constant(w);
                let y = tape.mul(out, w)?;
                total(tape, y)
            },
            &store,
            1e-5,
        )
        .unwrap();
        worst = worst.max(err);
    }
    assert!(worst < 1e-4, "{name}: relative error {worst:e}");
    worst
}

const B: Axis = Axis::Batch;
const TM: Axis = Axis::Time;
const F: Axis = Axis::Feature;
const IN: Axis = Axis::Input;
const S: Axis = Axis::Step;

#[test]
fn matmul_examples() {
    let a = t(&[(B, 2), (F, 2)], vec![1.0, 2.0, 3.0, 4.0]);
    let eye = t(&[(IN, 2), (F, 2)], vec![1.0, 0.0, 0.0, 1.0]);
    assert_eq!(tensor::matmul(&a, &eye).unwrap().data(), a.data());

    let row = t(&[(B, 1), (F, 2)], vec![1.0, 2.0]);
    let col = t(&[(IN, 2), (F, 1)], vec![3.0, 4.0]);
    assert_eq!(tensor::matmul(&row, &col).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let a = t(&[(B, 1), (F, 3)], vec![0.0; 3]);
    let w = t(&[(IN, 2), (F, 2)], vec![0.0; 4]);
    match tensor::matmul(&a, &w) {
        Err(Error::Shape(m)) => assert!(m.contains("F:3") && m.contains("In:2"), "{m}"),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn elementwise_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(t(&[(F, 1)], vec![0.0]));
    let s = tape.sigmoid(z).unwrap();
    let th = tape.tanh(z).unwrap();
    assert_eq!(tape.value(s).data(), &[0.5]);
    assert_eq!(tape.value(th).data(), &[0.0]);

    let a = tape.constant(t(&[(F, 2)], vec![1.0, 2.0]));
    let b = tape.constant(t(&[(F, 1)], vec![10.0]));
    let sum = tape.add(a, b).unwrap();
    assert_eq!(tape.value(sum).data(), &[11.0, 12.0]);
}

#[test]
fn log_of_non_positive_is_nan_not_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[(F, 2)], vec![-1.0, 1.0]));
    let y = tape.log(x).unwrap();
    assert!(tape.value(y).data()[0].is_nan());
    assert!(!tape.value(y).all_finite());
}

#[test]
fn incompatible_broadcast_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(t(&[(F, 2)], vec![1.0, 2.0]));
    let b = tape.constant(t(&[(F, 3)], vec![1.0, 2.0, 3.0]));
    assert!(matches!(tape.add(a, b), Err(Error::Shape(_))));
}

#[test]
fn reduce_sum_examples() {
    let x = t(&[(B, 1), (TM, 5)], vec![1.0; 5]).with_seq_lens(vec![3]).unwrap();
    assert_eq!(tensor::reduce_sum(&x, TM).unwrap().data(), &[3.0]);

    let x = t(&[(F, 3)], vec![1.0, 2.0, 3.0]);
    assert_eq!(tensor::reduce_sum(&x, F).unwrap().data(), &[6.0]);

    let x = t(&[(B, 2), (TM, 4)], vec![1.0; 8]).with_seq_lens(vec![2, 4]).unwrap();
    assert_eq!(tensor::reduce_sum(&x, TM).unwrap().data(), &[2.0, 4.0]);

    assert!(matches!(tensor::reduce_sum(&x, F), Err(Error::Shape(_))));
}

#[test]
fn gather_rows_examples() {
    let table = t(&[(IN, 2), (F, 2)], vec![1.0, 2.0, 3.0, 4.0]);
    let zeros = Ids::new(&[(B, 3)], vec![0, 0, 0]).unwrap();
    let out = tensor::gather_rows(&table, &zeros).unwrap();
    assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);

    let ids = Ids::new(&[(B, 2)], vec![1, 0]).unwrap();
    assert_eq!(tensor::gather_rows(&table, &ids).unwrap().data(), &[3.0, 4.0, 1.0, 2.0]);

    let bad = Ids::new(&[(B, 1)], vec![2]).unwrap();
    assert!(matches!(tensor::gather_rows(&table, &bad), Err(Error::Index(_))));
}

#[test]
fn gather_rows_gradient_scatters_into_the_table() {
    let mut tape = Tape::<f64>::new();
    let table = tape.param("emb", t(&[(IN, 3), (F, 1)], vec![0.5, 0.5, 0.5]));
    let ids = Arc::new(Ids::new(&[(B, 2)], vec![0, 0]).unwrap());
    let rows = tape.gather_rows(table, ids).unwrap();
    let loss = total(&mut tape, rows).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.of(table).data(), &[2.0, 0.0, 0.0]);
}

#[test]
fn dropout_examples() {
    let x = random(&[(B, 100), (F, 100)], RngKey::new(0, "x"), 0.5, 1.5);
    for train in [false, true] {
        let mut tape = Tape::<f64>::new();
        let n = tape.constant(x.clone());
        let y = dropout(&mut tape, n, 0.0, train, RngKey::new(1, "d")).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }
    let mut tape = Tape::<f64>::new();
    let n = tape.constant(x.clone());
    let y = dropout(&mut tape, n, 0.3, false, RngKey::new(1, "d")).unwrap();
    assert_eq!(tape.value(y).data(), x.data());

    let y = dropout(&mut tape, n, 0.5, true, RngKey::new(1, "d")).unwrap();
    let out = tape.value(y).data();
    let kept: Vec<usize> = (0..out.len()).filter(|&i| out[i] != 0.0).collect();
    let frac = kept.len() as f64 / out.len() as f64;
    assert!((frac - 0.5).abs() <= 0.02, "survivor fraction {frac}");
    for &i in &kept {
        assert_eq!(out[i], 2.0 * x.data()[i]);
    }
    assert!(matches!(dropout(&mut tape, n, 1.0, true, RngKey::new(1, "d")), Err(Error::Config(_))));
    assert!(matches!(dropout(&mut tape, n, -0.1, false, RngKey::new(1, "d")), Err(Error::Config(_))));
}

#[test]
fn dropout_masks_are_reproducible_per_key() {
    let x = random(&[(B, 10), (F, 10)], RngKey::new(0, "x"), 0.5, 1.5);
    let run = |key: RngKey| {
        let mut tape = Tape::<f64>::new();
        let n = tape.constant(x.clone());
        let y = dropout(&mut tape, n, 0.3, true, key).unwrap();
        tape.value(y).data().to_vec()
    };
    assert_eq!(run(RngKey::new(4, "layer").at(7)), run(RngKey::new(4, "layer").at(7)));
    assert_ne!(run(RngKey::new(4, "layer").at(7)), run(RngKey::new(4, "layer").at(8)));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param("p", t(&[(F, 3)], vec![0.3, -1.0, 2.0]));
    let loss = total(&mut tape, p).unwrap();
    assert_eq!(tape.backward(loss).unwrap().of(p).data(), &[1.0, 1.0, 1.0]);

    let mut tape = Tape::<f64>::new();
    let p = tape.param("p", t(&[(F, 2)], vec![1.0, 2.0]));
    let sq = tape.mul(p, p).unwrap();
    let loss = total(&mut tape, sq).unwrap();
    assert_eq!(tape.backward(loss).unwrap().of(p).data(), &[2.0, 4.0]);

    assert!(matches!(tape.backward(sq), Err(Error::Shape(_))));
}

#[test]
fn unreachable_params_get_zero_gradients() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param("p", t(&[(F, 2)], vec![1.0, 2.0]));
    let _q = tape.param("q", t(&[(F, 2)], vec![3.0, 4.0]));
    let loss = total(&mut tape, p).unwrap();
    let g = tape.backward(loss).unwrap().params();
    assert_eq!(g["q"].data(), &[0.0, 0.0]);
    assert_eq!(g["p"].data(), &[1.0, 1.0]);
}

#[test]
fn fan_out_gradients_accumulate() {
    let mut tape = Tape::<f64>::new();
    let p = tape.param("p", t(&[(F, 2)], vec![1.0, 2.0]));
    let twice = tape.add(p, p).unwrap();
    let e = tape.exp(p).unwrap();
    let both = tape.add(twice, e).unwrap();
    let loss = total(&mut tape, both).unwrap();
    let g = tape.backward(loss).unwrap().of(p);
    assert_abs_diff_eq!(g.data()[0], 2.0 + 1f64.exp(), epsilon = 1e-12);
    assert_abs_diff_eq!(g.data()[1], 2.0 + 2f64.exp(), epsilon = 1e-12);
}

#[test]
fn finite_diff_of_a_quadratic_is_exact() {
    let mut store = ParamStore::new();
    store.insert("x", t(&[(F, 1)], vec![3.0]));
    let err = finite_diff_check(
        |p, tape| {
            let x = p.register(tape, "x")?;
            let sq = tape.mul(x, x)?;
            total(tape, sq)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-8, "{err:e}");
}

#[test]
fn replay_reproduces_forward_values_bitwise() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param("x", random(&[(B, 3), (F, 4)], RngKey::new(1, "x"), -1.0, 1.0));
    let w = tape.param("w", random(&[(IN, 4), (F, 8)], RngKey::new(1, "w"), -1.0, 1.0));
    let c = tape.param("c", random(&[(B, 3), (F, 2)], RngKey::new(1, "c"), -1.0, 1.0));
    let z = tape.matmul(x, w).unwrap();
    let h = tape.lstm_cell(z, c).unwrap();
    let l = tape.log_softmax(h).unwrap();
    let loss = total(&mut tape, l).unwrap();
    let replayed = tape.replay().unwrap();
    for (i, node) in tape.nodes().iter().enumerate() {
        assert_eq!(node.value().data(), replayed[i].data());
    }
    assert_eq!(replayed[loss.index()].data(), tape.value(loss).data());
}

#[test]
fn lstm_cell_hand_example() {
    // Zero gates give i = f = o = 0.5 and candidate 0: c = 0.5 * c_prev.
    let z = t(&[(B, 1), (F, 4)], vec![0.0; 4]);
    let c_prev = t(&[(B, 1), (F, 1)], vec![2.0]);
    let out = tensor::lstm_cell(&z, &c_prev).unwrap();
    assert_abs_diff_eq!(out.data()[1], 1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(out.data()[0], 0.5 * 1f64.tanh(), epsilon = 1e-12);
    assert_abs_diff_eq!(out.data()[0], 0.380797, epsilon = 1e-6);
}

#[test]
fn masked_softmax_hand_example() {
    let x = t(&[(B, 1), (TM, 3), (F, 1)], vec![1.0, 2.0, 3.0]).with_seq_lens(vec![2]).unwrap();
    let p = tensor::softmax_time(&x).unwrap();
    let e = 1f64.exp();
    assert_abs_diff_eq!(p.data()[0], 1.0 / (1.0 + e), epsilon = 1e-12);
    assert_abs_diff_eq!(p.data()[1], e / (1.0 + e), epsilon = 1e-12);
    assert_eq!(p.data()[2], 0.0);
}

#[test]
fn smoothed_ce_hand_example() {
    // Uniform log-probs over 4 classes: CE is ln 4 whatever the smoothing.
    let lp = t(&[(B, 1), (S, 1), (F, 4)], vec![-(4f64.ln()); 4]);
    let y = Ids::new(&[(B, 1), (S, 1)], vec![2]).unwrap();
    let (ce, n) = tensor::smoothed_ce(&lp, &y, &[1], 0.1).unwrap();
    assert_eq!(n, 1);
    assert_abs_diff_eq!(ce, 4f64.ln(), epsilon = 1e-12);

    // log-probs [ln .5, ln .25, ln .25], target 0, eps 0.1:
    // q = [0.9333.., 0.0333.., 0.0333..]
    let lp = t(&[(B, 1), (S, 1), (F, 3)], vec![0.5f64.ln(), 0.25f64.ln(), 0.25f64.ln()]);
    let y = Ids::new(&[(B, 1), (S, 1)], vec![0]).unwrap();
    let (ce, _) = tensor::smoothed_ce(&lp, &y, &[1], 0.1).unwrap();
    let q_on = 1.0 - 0.1 + 0.1 / 3.0;
    let q_off = 0.1 / 3.0;
    let expect = -(q_on * 0.5f64.ln() + 2.0 * q_off * 0.25f64.ln());
    assert_abs_diff_eq!(ce, expect, epsilon = 1e-12);
    assert_abs_diff_eq!(ce, 0.739356, epsilon = 1e-6);
}

#[test]
fn fast_f32_math_tracks_f64() {
    let mut worst_exp = 0.0f64;
    let mut worst_tanh = 0.0f64;
    let mut worst_sig = 0.0f64;
    for i in -8000..=8000 {
        let x = i as f32 * 0.01;
        let e = (x as f64).exp();
        worst_exp = worst_exp.max(((x.exp_() as f64) - e).abs() / e);
        worst_tanh = worst_tanh.max(((x.tanh_() as f64) - (x as f64).tanh()).abs());
        worst_sig = worst_sig.max(((x.sigmoid_() as f64) - 1.0 / (1.0 + (-(x as f64)).exp())).abs());
    }
    assert!(worst_exp < 5e-7, "exp relative error {worst_exp:e}");
    assert!(worst_tanh < 5e-7, "tanh absolute error {worst_tanh:e}");
    assert!(worst_sig < 5e-7, "sigmoid absolute error {worst_sig:e}");
    assert_eq!((-200.0f32).exp_(), (-87.0f32).exp_());
    assert!(100.0f32.exp_().is_finite());
}

const BT: &[(Axis, usize)] = &[(B, 3), (TM, 4), (F, 2)];
const BF: &[(Axis, usize)] = &[(B, 3), (F, 2)];

#[test]
fn gradcheck_binary_ops_with_broadcasting() {
    grad_check("add", &[("a", BT, -1.0, 1.0), ("b", &[(F, 2)], -1.0, 1.0)], None, 10, |t, x| t.add(x[0], x[1]));
    grad_check("sub", &[("a", BF, -1.0, 1.0), ("b", BT, -1.0, 1.0)], None, 10, |t, x| t.sub(x[0], x[1]));
    grad_check("mul", &[("a", BT, -1.0, 1.0), ("b", &[(B, 3), (TM, 4), (F, 1)], -1.0, 1.0)], None, 10, |t, x| {
        t.mul(x[0], x[1])
    });
    grad_check("scale", &[("a", BF, -1.0, 1.0)], None, 10, |t, x| t.scale(x[0], -2.5));
}

#[test]
fn gradcheck_unary_ops() {
    grad_check("tanh", &[("a", BT, -2.0, 2.0)], None, 10, |t, x| t.tanh(x[0]));
    grad_check("sigmoid", &[("a", BT, -2.0, 2.0)], None, 10, |t, x| t.sigmoid(x[0]));
    // Keep away from the kink at zero.
    grad_check("relu", &[("a", BT, 0.1, 1.0)], None, 5, |t, x| t.relu(x[0]));
    grad_check("relu-neg", &[("a", BT, -1.0, -0.1)], None, 5, |t, x| t.relu(x[0]));
    grad_check("exp", &[("a", BT, -2.0, 2.0)], None, 10, |t, x| t.exp(x[0]));
    grad_check("log", &[("a", BT, 0.2, 3.0)], None, 10, |t, x| t.log(x[0]));
}

#[test]
fn gradcheck_matmul_and_reductions() {
    grad_check("matmul", &[("x", BT, -1.0, 1.0), ("w", &[(IN, 2), (F, 5)], -1.0, 1.0)], None, 10, |t, x| {
        t.matmul(x[0], x[1])
    });
    grad_check("reduce_time", &[("x", BT, -1.0, 1.0)], Some(vec![4, 1, 3]), 10, |t, x| t.reduce_sum(x[0], TM));
    grad_check("reduce_feature", &[("x", BT, -1.0, 1.0)], None, 10, |t, x| t.reduce_sum(x[0], F));
    let ids = Arc::new(Ids::new(&[(B, 2), (TM, 3)], vec![0, 3, 3, 1, 0, 2]).unwrap());
    grad_check("gather_rows", &[("emb", &[(IN, 4), (F, 3)], -1.0, 1.0)], None, 10, |t, x| {
        t.gather_rows(x[0], Arc::clone(&ids))
    });
}

#[test]
fn gradcheck_softmaxes() {
    grad_check("softmax_time", &[("e", &[(B, 3), (TM, 4), (F, 1)], -2.0, 2.0)], Some(vec![4, 2, 1]), 10, |t, x| {
        t.softmax_time(x[0])
    });
    grad_check("log_softmax", &[("x", &[(B, 3), (F, 5)], -2.0, 2.0)], None, 10, |t, x| t.log_softmax(x[0]));
}

#[test]
fn gradcheck_structural_ops() {
    grad_check("concat", &[("a", BT, -1.0, 1.0), ("b", &[(B, 3), (F, 3)], -1.0, 1.0)], None, 10, |t, x| {
        t.concat(&[x[0], x[1]])
    });
    grad_check("slice", &[("a", &[(B, 2), (F, 6)], -1.0, 1.0)], None, 10, |t, x| t.slice_feature(x[0], 2, 3));
    grad_check("select", &[("a", BT, -1.0, 1.0)], None, 10, |t, x| t.select(x[0], TM, 2));
    grad_check("stack", &[("a", BF, -1.0, 1.0), ("b", BF, -1.0, 1.0)], None, 10, |t, x| t.stack(&[x[0], x[1], x[0]], TM));
    let pos = Arc::new(vec![Some(3), None, Some(0)]);
    grad_check("gather_time", &[("a", BT, -1.0, 1.0)], None, 10, |t, x| t.gather_time(x[0], Arc::clone(&pos)));
    let spos = Arc::new(vec![vec![Some(0), Some(1), None], vec![Some(2), Some(0), Some(1)]]);
    grad_check("scatter_time", &[("a", BF, -1.0, 1.0), ("b", BF, -1.0, 1.0)], None, 10, |t, x| {
        t.scatter_time(&[x[0], x[1]], Arc::clone(&spos), 3, None)
    });
}

#[test]
fn gradcheck_lstm_cell() {
    grad_check("lstm_cell", &[("z", &[(B, 3), (F, 8)], -2.0, 2.0), ("c", &[(B, 3), (F, 2)], -1.0, 1.0)], None, 10, |t, x| {
        t.lstm_cell(x[0], x[1])
    });
}

#[test]
fn gradcheck_sequence_losses() {
    let targets = Arc::new(Ids::new(&[(B, 2), (S, 3)], vec![1, 0, 4, 2, 2, 3]).unwrap());
    let lens = Arc::new(vec![3, 2]);
    for eps in [0.0, 0.1] {
        grad_check("smoothed_ce", &[("x", &[(B, 2), (S, 3), (F, 5)], -2.0, 2.0)], None, 10, |t, x| {
            let lp = t.log_softmax(x[0])?;
            t.smoothed_ce(lp, Arc::clone(&targets), Arc::clone(&lens), eps)
        });
    }
    grad_check("seq_log_lik", &[("x", &[(B, 2), (S, 3), (F, 5)], -2.0, 2.0)], None, 10, |t, x| {
        let lp = t.log_softmax(x[0])?;
        t.seq_log_lik(lp, Arc::clone(&targets), Arc::clone(&lens))
    });
}

#[test]
fn seq_log_lik_sums_valid_target_log_probs() {
    let mut tape = Tape::<f64>::new();
    let lp = t(&[(B, 2), (S, 2), (F, 2)], vec![-0.1, -2.0, -0.3, -1.5, -0.7, -0.8, -4.0, -0.01]);
    let n = tape.constant(lp);
    let targets = Arc::new(Ids::new(&[(B, 2), (S, 2)], vec![0, 1, 1, 0]).unwrap());
    let out = tape.seq_log_lik(n, targets, Arc::new(vec![2, 1])).unwrap();
    assert_eq!(tape.value(out).data(), &[-0.1 + -1.5, -0.8]);
}

/// Attention-style composition: softmax over masked energies, weighted sum of values.
fn attention(tape: &mut Tape<f64>, e: NodeId, v: NodeId) -> Result<NodeId> {
    let a = tape.softmax_time(e)?;
    let w = tape.mul(a, v)?;
    tape.reduce_sum(w, TM)
}

#[test]
fn gradcheck_layer_composition() {
    grad_check(
        "attention",
        &[("e", &[(B, 3), (TM, 4), (F, 1)], -1.0, 1.0), ("v", BT, -1.0, 1.0)],
        Some(vec![4, 2, 3]),
        10,
        |t, x| attention(t, x[0], x[1]),
    );
}

#[test]
fn masked_positions_do_not_leak() {
    let lens = vec![4, 2, 3];
    let e = random(&[(B, 3), (TM, 4), (F, 1)], RngKey::new(5, "e"), -1.0, 1.0).with_seq_lens(lens.clone()).unwrap();
    let v = random(BT, RngKey::new(5, "v"), -1.0, 1.0).with_seq_lens(lens.clone()).unwrap();
    let mut e2 = e.clone();
    let mut v2 = v.clone();
    for (b, &l) in lens.iter().enumerate() {
        for tm in l..4 {
            e2.data_mut()[b * 4 + tm] = 1e3;
            for f in 0..2 {
                v2.data_mut()[(b * 4 + tm) * 2 + f] = -7.0;
            }
        }
    }
    let run = |e: &Tensor<f64>, v: &Tensor<f64>| {
        let mut tape = Tape::<f64>::new();
        let en = tape.param("e", e.clone());
        let vn = tape.param("v", v.clone());
        let out = attention(&mut tape, en, vn).unwrap();
        let loss = total(&mut tape, out).unwrap();
        let g = tape.backward(loss).unwrap();
        (tape.value(out).data().to_vec(), g.of(en), g.of(vn))
    };
    let (o1, ge1, gv1) = run(&e, &v);
    let (o2, ge2, gv2) = run(&e2, &v2);
    assert_eq!(o1, o2);
    assert_eq!(ge1.data(), ge2.data());
    assert_eq!(gv1.data(), gv2.data());
}

#[test]
fn forward_is_bitwise_deterministic() {
    let build = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random(&[(B, 4), (TM, 5), (F, 6)], RngKey::new(2, "x"), -1.0, 1.0).cast::<f32>());
        let w = tape.param("w", random(&[(IN, 6), (F, 8)], RngKey::new(2, "w"), -1.0, 1.0).cast::<f32>());
        let z = tape.matmul(x, w).unwrap();
        let y = tape.tanh(z).unwrap();
        let d = dropout(&mut tape, y, 0.3, true, RngKey::new(2, "drop")).unwrap();
        let l = tape.log_softmax(d).unwrap();
        tape.value(l).data().to_vec()
    };
    let a = build();
    let b = build();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

fn dims_strategy() -> impl Strategy<Value = (Vec<(Axis, usize)>, Vec<(Axis, usize)>)> {
    // For each of B, T, F: present in a, in b, in both (possibly extent 1 on one side).
    let per_axis = (0u8..5, 1usize..4);
    (per_axis.clone(), per_axis.clone(), per_axis).prop_map(|(pb, pt, pf)| {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for (axis, (mode, n)) in [(B, pb), (TM, pt), (F, pf)] {
            match mode {
                0 => a.push((axis, n)),
                1 => b.push((axis, n)),
                2 => {
                    a.push((axis, n));
                    b.push((axis, n));
                }
                3 => {
                    a.push((axis, 1));
                    b.push((axis, n));
                }
                _ => {
                    a.push((axis, n));
                    b.push((axis, 1));
                }
            }
        }
        (a, b)
    })
}

/// Value of `x` at a full `(B, T, F)` coordinate, treating absent or
/// extent-1 axes as repeated.
fn tile_at(x: &Tensor<f64>, coord: [usize; 3]) -> f64 {
    let mut idx = 0;
    for &(axis, n) in x.shape().dims() {
        let c = match axis {
            Axis::Batch => coord[0],
            Axis::Time => coord[1],
            _ => coord[2],
        };
        idx = idx * n + if n == 1 { 0 } else { c };
    }
    x.data()[idx]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn broadcasting_matches_materialized_tiles((da, db) in dims_strategy(), seed in 0u64..1000) {
        prop_assume!(!da.is_empty() && !db.is_empty());
        let a = random(&da, RngKey::new(seed, "a"), -1.0, 1.0);
        let b = random(&db, RngKey::new(seed, "b"), -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let an = tape.constant(a.clone());
        let bn = tape.constant(b.clone());
        let sum = tape.add(an, bn).unwrap();
        let prod = tape.mul(an, bn).unwrap();
        let out_shape = tape.value(sum).shape().clone();
        let ext = |axis| out_shape.extent(axis).unwrap_or(1);
        let mut i = 0;
        for bi in 0..ext(B) {
            for ti in 0..ext(TM) {
                for fi in 0..ext(F) {
                    let (x, y) = (tile_at(&a, [bi, ti, fi]), tile_at(&b, [bi, ti, fi]));
                    prop_assert_eq!(tape.value(sum).data()[i], x + y);
                    prop_assert_eq!(tape.value(prod).data()[i], x * y);
                    i += 1;
                }
            }
        }
        prop_assert_eq!(i, out_shape.numel());
    }

    #[test]
    fn softmax_time_rows_sum_to_one_over_valid_positions(seed in 0u64..1000, l0 in 1usize..6, l1 in 1usize..6) {
        let x = random(&[(B, 2), (TM, 5), (F, 1)], RngKey::new(seed, "x"), -5.0, 5.0)
            .with_seq_lens(vec![l0, l1]).unwrap();
        let p = tensor::softmax_time(&x).unwrap();
        for (b, &l) in [l0, l1].iter().enumerate() {
            let row = &p.data()[b * 5..(b + 1) * 5];
            prop_assert!((row[..l].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row[l..].iter().all(|&v| v == 0.0));
        }
    }
}
