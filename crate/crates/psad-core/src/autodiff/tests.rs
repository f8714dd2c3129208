//! Unit tests for the tape: primitive forward values, analytic-vs-numeric
//! gradients, stop-gradient semantics, and the Adam update rule.

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Error;

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(
            (x - y).abs() <= tol,
            "index {i}: {x} vs {y} (tol {tol})"
        );
    }
}

#[test]
fn hadamard_elementwise() {
    let mut g = Graph::new();
    let a = g.constant(vec![1.0, 2.0], vec![2]);
    let b = g.constant(vec![3.0, 4.0], vec![2]);
    let c = g.hadamard(a, b).unwrap();
    assert_eq!(g.values(c), &[3.0, 8.0]);
}

#[test]
fn row_softmax_symmetry() {
    let mut g = Graph::new();
    let a = g.constant(vec![0.0, 0.0], vec![1, 2]);
    let s = g.row_softmax(a).unwrap();
    assert_eq!(g.values(s), &[0.5, 0.5]);
}

#[test]
fn matmul_zero_annihilation() {
    let mut g = Graph::new();
    let a = g.zeros(vec![2, 3]);
    let b = g.constant(vec![1.0; 12], vec![3, 4]);
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 4]);
    assert!(g.values(c).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_mismatch_names_primitive() {
    let mut g = Graph::new();
    let a = g.zeros(vec![2, 3]);
    let b = g.zeros(vec![4, 2]);
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("matmul"), "got: {msg}");
}

#[test]
fn log_domain_error() {
    let mut g = Graph::new();
    let a = g.constant(vec![1.0, -0.5], vec![2]);
    match g.log(a) {
        Err(Error::LogDomain { value, index }) => {
            assert_eq!(index, 1);
            assert_eq!(value, -0.5);
        }
        other => panic!("expected LogDomain, got {other:?}"),
    }
}

#[test]
fn stop_gradient_identity_forward() {
    let mut g = Graph::new();
    let x = g.leaf(vec![1.5], vec![1]);
    let y = g.stop_gradient(x);
    assert_eq!(g.values(y), &[1.5]);
}

#[test]
fn stop_gradient_zero_backward() {
    let mut g = Graph::new();
    let x = g.leaf(vec![2.0, -1.0], vec![2]);
    let y = g.stop_gradient(x);
    let loss = g.sum(y).unwrap();
    let grads = g.backward(loss).unwrap();
    // x is still reported, with a bitwise-zero gradient
    let gx = grads.get(x).unwrap();
    assert!(gx.iter().all(|&v| v == 0.0 && v.to_bits() == 0));
}

#[test]
fn stop_gradient_severs_one_branch() {
    // y = x * sg(x) at x=3: dy/dx = 3, not 6
    let mut g = Graph::new();
    let x = g.leaf(vec![3.0], vec![1]);
    let frozen = g.stop_gradient(x);
    let y = g.hadamard(x, frozen).unwrap();
    let loss = g.sum(y).unwrap();
    assert_eq!(g.values(loss), &[9.0]);
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[3.0]);
}

#[test]
fn backward_quadratic() {
    let mut g = Graph::new();
    let x = g.leaf(vec![3.0], vec![1]);
    let sq = g.hadamard(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap(), &[6.0]);
}

#[test]
fn backward_sigmoid_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf(vec![0.0], vec![1]);
    let s = g.sigmoid(x).unwrap();
    let loss = g.sum(s).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_close(grads.get(x).unwrap(), &[0.25], 1e-15);
}

#[test]
fn backward_non_scalar_loss_rejected() {
    let mut g = Graph::new();
    let x = g.leaf(vec![1.0, 2.0], vec![2]);
    match g.backward(x) {
        Err(Error::NonScalarLoss { shape }) => assert_eq!(shape, vec![2]),
        other => panic!("expected NonScalarLoss, got {other:?}"),
    }
}

#[test]
fn backward_deterministic() {
    let mut g = Graph::new();
    let x = g.leaf(vec![0.3, -0.7, 1.2], vec![1, 3]);
    let s = g.row_softmax(x).unwrap();
    let t = g.tanh(s).unwrap();
    let loss = g.sum(t).unwrap();
    let g1 = g.backward(loss).unwrap();
    let g2 = g.backward(loss).unwrap();
    assert_eq!(g1, g2);
}

// ── finite-difference checks for every primitive ────────────────────────

/// FD-checks d(sum(w ⊙ f(inputs)))/d(inputs) for a graph-building closure.
fn fd_check(
    build: impl Fn(&mut Graph, &[Tensor]) -> Tensor,
    input_shapes: &[Vec<usize>],
    seed: u64,
) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<(Vec<f64>, Vec<usize>)> = input_shapes
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            (vals, s.clone())
        })
        .collect();

    let eval = |vals: &[Vec<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut g = Graph::new();
        let leaves: Vec<Tensor> = vals
            .iter()
            .zip(input_shapes)
            .map(|(v, s)| g.leaf(v.clone(), s.clone()))
            .collect();
        let out = build(&mut g, &leaves);
        let total = g.sum(out).unwrap();
        let loss_val = g.scalar_value(total);
        let grads = g.backward(total).unwrap();
        let gs = leaves.iter().map(|&l| grads.get(l).unwrap().to_vec()).collect();
        (loss_val, gs)
    };

    let base_vals: Vec<Vec<f64>> = inputs.iter().map(|(v, _)| v.clone()).collect();
    let (_, analytic) = eval(&base_vals);

    let h = 1e-6;
    for (ti, (vals, _)) in inputs.iter().enumerate() {
        for i in 0..vals.len() {
            let mut plus = base_vals.clone();
            plus[ti][i] += h;
            let mut minus = base_vals.clone();
            minus[ti][i] -= h;
            let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic[ti][i];
            let err = if a.abs() < 1e-8 && fd.abs() < 1e-8 {
                (a - fd).abs()
            } else {
                (a - fd).abs() / a.abs().max(fd.abs())
            };
            assert!(err <= 1e-5, "tensor {ti} entry {i}: analytic {a} vs fd {fd}");
        }
    }
}

#[test]
fn fd_matmul() {
    fd_check(
        |g, t| g.matmul(t[0], t[1]).unwrap(),
        &[vec![3, 4], vec![4, 2]],
        1,
    );
}

#[test]
fn fd_transpose_scale_add() {
    fd_check(
        |g, t| {
            let tr = g.transpose(t[0]).unwrap();
            let sc = g.scale(tr, -1.7).unwrap();
            g.add(sc, t[1]).unwrap()
        },
        &[vec![2, 3], vec![3, 2]],
        2,
    );
}

#[test]
fn fd_broadcast_add_row_col_scalar() {
    fd_check(
        |g, t| {
            let a = g.add(t[0], t[1]).unwrap(); // row broadcast
            let b = g.add(a, t[2]).unwrap(); // col broadcast
            g.add(b, t[3]).unwrap() // scalar broadcast
        },
        &[vec![3, 4], vec![1, 4], vec![3, 1], vec![1]],
        3,
    );
}

#[test]
fn fd_hadamard_broadcast() {
    fd_check(
        |g, t| {
            let a = g.hadamard(t[0], t[1]).unwrap();
            g.hadamard(a, t[2]).unwrap()
        },
        &[vec![3, 4], vec![3, 1], vec![1, 4]],
        4,
    );
}

#[test]
fn fd_concat_gather() {
    fd_check(
        |g, t| {
            let c = g.concat_last_dim(&[t[0], t[1]]).unwrap();
            // repeated index exercises scatter-add
            g.gather_rows(c, vec![0, 2, 0]).unwrap()
        },
        &[vec![3, 2], vec![3, 3]],
        5,
    );
}

#[test]
fn fd_activations() {
    fd_check(
        |g, t| {
            let s = g.sigmoid(t[0]).unwrap();
            let th = g.tanh(s).unwrap();
            let ge = g.gelu(th).unwrap();
            g.exp(ge).unwrap()
        },
        &[vec![2, 5]],
        6,
    );
}

#[test]
fn fd_log_softmax_chain() {
    fd_check(
        |g, t| {
            let sm = g.row_softmax(t[0]).unwrap();
            g.log(sm).unwrap()
        },
        &[vec![3, 4]],
        7,
    );
}

#[test]
fn fd_reductions() {
    fd_check(
        |g, t| {
            let s = g.sum(t[0]).unwrap();
            let m = g.mean(t[1]).unwrap();
            let mx = g.max(t[2]).unwrap();
            let mn = g.min(t[2]).unwrap();
            let a = g.add(s, m).unwrap();
            let b = g.add(mx, mn).unwrap();
            g.add(a, b).unwrap()
        },
        &[vec![2, 3], vec![4], vec![5]],
        8,
    );
}

#[test]
fn fd_masked_fill() {
    fd_check(
        |g, t| {
            let mask = vec![true, false, false, true, false, false];
            g.masked_fill(t[0], mask, -3.0).unwrap()
        },
        &[vec![2, 3]],
        9,
    );
}

#[test]
fn fd_stop_gradient_matches_frozen_forward() {
    // grad_check pins sg branches, so FD must agree with analytic exactly
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let vals: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
    store.insert("x", vals, vec![2, 3]);
    let worst = grad_check(&mut store, 1e-5, |store, g| {
        let mut b = Binder::new(store);
        let x = b.get(g, "x")?;
        let frozen = g.stop_gradient(x);
        let prod = g.hadamard(x, frozen)?;
        let loss = g.sum(prod)?;
        Ok(ForwardOutput {
            loss,
            bindings: b.bindings().clone(),
        })
    })
    .unwrap();
    assert!(worst < 1e-8, "worst rel err {worst}");
}

#[test]
fn fd_only_stop_gradient_path_is_zero() {
    let mut store = ParamStore::new();
    store.insert("x", vec![0.4, -1.2], vec![2]);
    let worst = grad_check(&mut store, 1e-5, |store, g| {
        let mut b = Binder::new(store);
        let x = b.get(g, "x")?;
        let frozen = g.stop_gradient(x);
        let loss = g.sum(frozen)?;
        Ok(ForwardOutput {
            loss,
            bindings: b.bindings().clone(),
        })
    })
    .unwrap();
    assert!(worst < 1e-12, "worst err {worst}");
}

#[test]
fn grad_check_quadratic_toy() {
    let mut store = ParamStore::new();
    store.insert("w", vec![0.5, -1.5, 2.0], vec![3]);
    let worst = grad_check(&mut store, 1e-5, |store, g| {
        let mut b = Binder::new(store);
        let w = b.get(g, "w")?;
        let sq = g.hadamard(w, w)?;
        let loss = g.sum(sq)?;
        Ok(ForwardOutput {
            loss,
            bindings: b.bindings().clone(),
        })
    })
    .unwrap();
    assert!(worst < 1e-8, "worst rel err {worst}");
}

#[test]
fn grad_check_rejects_nondeterministic_forward() {
    use std::cell::Cell;
    let mut store = ParamStore::new();
    store.insert("w", vec![1.0], vec![1]);
    let counter = Cell::new(0.0);
    let err = grad_check(&mut store, 1e-5, |store, g| {
        let mut b = Binder::new(store);
        let w = b.get(g, "w")?;
        counter.set(counter.get() + 1.0);
        let noise = g.scalar(counter.get());
        let loss0 = g.hadamard(w, noise)?;
        let loss = g.sum(loss0)?;
        Ok(ForwardOutput {
            loss,
            bindings: b.bindings().clone(),
        })
    })
    .unwrap_err();
    assert!(matches!(err, Error::NonDeterministicForward));
}

// ── Adam ────────────────────────────────────────────────────────────────

#[test]
fn adam_zero_gradient_no_move() {
    let mut store = ParamStore::new();
    store.insert("w", vec![1.0, -2.0], vec![2]);
    let mut adam = Adam::new(AdamConfig::default());
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![0.0, 0.0]);
    adam.step(&mut store, &["w".to_string()], &grads).unwrap();
    assert_eq!(store.get("w").unwrap().values, vec![1.0, -2.0]);
}

#[test]
fn adam_first_step_magnitude() {
    // one step, g=1, lr=0.1: bias-corrected update is -lr * 1/(1+eps)
    let mut store = ParamStore::new();
    store.insert("w", vec![0.0], vec![1]);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 0.1,
        ..AdamConfig::default()
    });
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![1.0]);
    adam.step(&mut store, &["w".to_string()], &grads).unwrap();
    let w = store.get("w").unwrap().values[0];
    assert!((w + 0.1).abs() < 1e-6, "got {w}");
}

#[test]
fn adam_constant_gradient_approaches_lr() {
    let mut store = ParamStore::new();
    store.insert("w", vec![0.0], vec![1]);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: 0.01,
        ..AdamConfig::default()
    });
    let mut grads = BTreeMap::new();
    grads.insert("w".to_string(), vec![1.0]);
    let mut prev = 0.0;
    for _ in 0..200 {
        prev = store.get("w").unwrap().values[0];
        adam.step(&mut store, &["w".to_string()], &grads).unwrap();
    }
    let delta = (store.get("w").unwrap().values[0] - prev).abs();
    assert!((delta - 0.01).abs() < 1e-4, "step magnitude {delta}");
}

#[test]
fn adam_missing_gradient_is_detached_error() {
    let mut store = ParamStore::new();
    store.insert("w", vec![0.0], vec![1]);
    let mut adam = Adam::new(AdamConfig::default());
    let grads = BTreeMap::new();
    let err = adam.step(&mut store, &["w".to_string()], &grads).unwrap_err();
    assert!(matches!(err, Error::DetachedParam { .. }));
}

// ── property tests ──────────────────────────────────────────────────────

proptest! {
    #[test]
    fn row_softmax_rows_are_distributions(
        rows in 1usize..5,
        cols in 1usize..6,
        seed in 0u64..1000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut g = Graph::new();
        let x = g.constant(vals, vec![rows, cols]);
        let s = g.row_softmax(x).unwrap();
        let out = g.values(s);
        for r in 0..rows {
            let row = &out[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn stop_gradient_bitwise_zero(seed in 0u64..1000, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut g = Graph::new();
        let x = g.leaf(vals, vec![n]);
        let sg = g.stop_gradient(x);
        let t = g.tanh(sg).unwrap();
        let loss = g.sum(t).unwrap();
        let grads = g.backward(loss).unwrap();
        let gx = grads.get(x).unwrap();
        prop_assert!(gx.iter().all(|v| v.to_bits() == 0));
    }
}
