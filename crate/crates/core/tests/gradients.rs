//! Reverse-mode gradients against central finite differences.

use std::collections::HashMap;

use blaq_core::autodiff::{Bindings, Graph, NodeId};
use blaq_core::tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-8;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(ABS_FLOOR)
}

/// Values bounded away from zero so kinks of relu/abs are never straddled.
fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Compares every trainable entry of `bindings` with a central difference.
fn check_all(graph: &mut Graph, bindings: &Bindings) -> f64 {
    graph.forward(bindings.clone()).unwrap();
    let grads = graph.backward().unwrap();
    let mut worst: f64 = 0.0;
    for (name, g) in &grads {
        for i in 0..g.len() {
            let numeric = central(graph, bindings, name, i);
            worst = worst.max(rel_err(g.data()[i], numeric));
        }
    }
    worst
}

fn central(graph: &mut Graph, bindings: &Bindings, name: &str, i: usize) -> f64 {
    let mut plus = bindings.clone();
    plus.get_mut(name).unwrap().data_mut()[i] += H;
    let mut minus = bindings.clone();
    minus.get_mut(name).unwrap().data_mut()[i] -= H;
    (graph.forward(plus).unwrap() - graph.forward(minus).unwrap()) / (2.0 * H)
}

/// `sum(k ⊙ op(x))` with a fixed random `k`, so the upstream gradient of
/// `op` is not constant.
fn unary_graph(n: usize, op: impl Fn(&mut Graph, NodeId) -> NodeId, rng: &mut impl Rng) -> Graph {
    let mut g = Graph::new();
    let x = g.parameter("x", &[n]).unwrap();
    let y = op(&mut g, x);
    let k = g.constant(Tensor::vector((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let p = g.mul(y, k).unwrap();
    let s = g.sum(p).unwrap();
    g.set_output(s).unwrap();
    g
}

fn probe_unary(label: &str, op: impl Fn(&mut Graph, NodeId) -> NodeId + Copy) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let n = 4;
        let mut g = unary_graph(n, op, &mut rng);
        let b: Bindings = HashMap::from([("x".into(), Tensor::vector(away_from_zero(&mut rng, n)).unwrap())]);
        let worst = check_all(&mut g, &b);
        assert!(worst < REL_TOL, "{label}: relative error {worst}");
    }
}

#[test]
fn relu_matches_finite_differences() {
    probe_unary("relu", |g, x| g.relu(x).unwrap());
}

#[test]
fn square_matches_finite_differences() {
    probe_unary("square", |g, x| g.square(x).unwrap());
}

#[test]
fn abs_matches_finite_differences() {
    probe_unary("abs", |g, x| g.abs(x).unwrap());
}

#[test]
fn power_matches_finite_differences() {
    probe_unary("power 1.5", |g, x| g.power(x, 1.5).unwrap());
    probe_unary("power 3", |g, x| g.power(x, 3.0).unwrap());
}

#[test]
fn scale_and_shift_match_finite_differences() {
    probe_unary("scale", |g, x| g.scale(x, -2.5).unwrap());
    probe_unary("shift", |g, x| {
        let s = g.shift(x, 0.7).unwrap();
        g.square(s).unwrap()
    });
}

#[test]
fn mean_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let mut g = Graph::new();
        let x = g.parameter("x", &[2, 3]).unwrap();
        let sq = g.square(x).unwrap();
        let m = g.mean(sq).unwrap();
        g.set_output(m).unwrap();
        let b = HashMap::from([("x".into(), Tensor::matrix(2, 3, away_from_zero(&mut rng, 6)).unwrap())]);
        assert!(check_all(&mut g, &b) < REL_TOL);
    }
}

#[test]
fn binary_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let mut g = Graph::new();
        let a = g.parameter("a", &[3]).unwrap();
        let b = g.parameter("b", &[3]).unwrap();
        let s = g.add(a, b).unwrap();
        let d = g.sub(a, b).unwrap();
        let p = g.mul(s, d).unwrap();
        let q = g.mul(p, a).unwrap();
        let out = g.sum(q).unwrap();
        g.set_output(out).unwrap();
        let bind = HashMap::from([
            ("a".into(), Tensor::vector(away_from_zero(&mut rng, 3)).unwrap()),
            ("b".into(), Tensor::vector(away_from_zero(&mut rng, 3)).unwrap()),
        ]);
        assert!(check_all(&mut g, &bind) < REL_TOL);
    }
}

#[test]
fn matmul_bias_and_cross_entropy_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (batch, inp, out) = (3, 4, 5);
        let mut g = Graph::new();
        let x = g.input("x", &[batch, inp]).unwrap();
        let y = g.input("y", &[batch]).unwrap();
        let w = g.parameter("w", &[inp, out]).unwrap();
        let b = g.parameter("b", &[out]).unwrap();
        let z = g.matmul(x, w).unwrap();
        let z = g.add_bias(z, b).unwrap();
        let l = g.softmax_cross_entropy(z, y).unwrap();
        g.set_output(l).unwrap();
        let bind = HashMap::from([
            ("x".into(), Tensor::matrix(batch, inp, away_from_zero(&mut rng, batch * inp)).unwrap()),
            (
                "y".into(),
                Tensor::vector((0..batch).map(|_| rng.random_range(0..out) as f64).collect()).unwrap(),
            ),
            ("w".into(), Tensor::matrix(inp, out, away_from_zero(&mut rng, inp * out)).unwrap()),
            ("b".into(), Tensor::vector(away_from_zero(&mut rng, out)).unwrap()),
        ]);
        assert!(check_all(&mut g, &bind) < REL_TOL);
    }
}

/// The four-weight-layer classifier used for MNIST, probed at 100 random
/// parameter coordinates.
#[test]
fn full_mlp_matches_finite_differences() {
    let sizes = [784, 256, 128, 64, 10];
    let batch = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut g = Graph::new();
    let x = g.input("x", &[batch, sizes[0]]).unwrap();
    let y = g.input("y", &[batch]).unwrap();
    let mut h = x;
    let mut bind: Bindings = HashMap::new();
    for (l, pair) in sizes.windows(2).enumerate() {
        let wn = format!("W{}", l + 1);
        let bn = format!("b{}", l + 1);
        let w = g.parameter(&wn, &[pair[0], pair[1]]).unwrap();
        let b = g.parameter(&bn, &[pair[1]]).unwrap();
        let limit = (6.0 / (pair[0] + pair[1]) as f64).sqrt();
        bind.insert(
            wn,
            Tensor::matrix(
                pair[0],
                pair[1],
                (0..pair[0] * pair[1]).map(|_| rng.random_range(-limit..limit)).collect(),
            )
            .unwrap(),
        );
        bind.insert(
            bn,
            Tensor::vector((0..pair[1]).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap(),
        );
        let z = g.matmul(h, w).unwrap();
        let z = g.add_bias(z, b).unwrap();
        h = if l + 2 < sizes.len() { g.relu(z).unwrap() } else { z };
    }
    let loss = g.softmax_cross_entropy(h, y).unwrap();
    g.set_output(loss).unwrap();
    bind.insert(
        "x".into(),
        Tensor::matrix(batch, 784, (0..batch * 784).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap(),
    );
    bind.insert("y".into(), Tensor::vector(vec![3.0, 0.0, 9.0, 3.0]).unwrap());

    g.forward(bind.clone()).unwrap();
    let grads = g.backward().unwrap();
    let names: Vec<String> = (1..=4).flat_map(|l| [format!("W{l}"), format!("b{l}")]).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let name = &names[rng.random_range(0..names.len())];
        let i = rng.random_range(0..grads[name].len());
        worst = worst.max(rel_err(grads[name].data()[i], central(&mut g, &bind, name, i)));
    }
    assert!(worst < REL_TOL, "relative error {worst}");
}

#[test]
fn mlp_with_zero_weights_has_uniform_loss() {
    let mut g = Graph::new();
    let x = g.input("x", &[2, 784]).unwrap();
    let y = g.input("y", &[2]).unwrap();
    let w1 = g.parameter("W1", &[784, 100]).unwrap();
    let w2 = g.parameter("W2", &[100, 10]).unwrap();
    let h = g.matmul(x, w1).unwrap();
    let h = g.relu(h).unwrap();
    let z = g.matmul(h, w2).unwrap();
    let l = g.softmax_cross_entropy(z, y).unwrap();
    g.set_output(l).unwrap();
    let loss = g
        .forward(HashMap::from([
            ("x".into(), Tensor::filled(&[2, 784], 0.3)),
            ("y".into(), Tensor::vector(vec![2.0, 7.0]).unwrap()),
            ("W1".into(), Tensor::zeros(&[784, 100])),
            ("W2".into(), Tensor::zeros(&[100, 10])),
        ]))
        .unwrap();
    assert!((loss - 2.302585092994046).abs() < 1e-12);
}

#[test]
fn toy2d_objective_values() {
    let mut g = Graph::new();
    let w = g.parameter("w", &[2]).unwrap();
    let c = g.constant(Tensor::vector(vec![0.054, -0.055]).unwrap());
    let k = g.constant(Tensor::vector(vec![5.0, 1.0]).unwrap());
    let d = g.sub(w, c).unwrap();
    let s = g.square(d).unwrap();
    let p = g.mul(k, s).unwrap();
    let l = g.sum(p).unwrap();
    g.set_output(l).unwrap();
    let at = |g: &mut Graph, v: [f64; 2]| {
        let loss = g
            .forward(HashMap::from([("w".into(), Tensor::vector(v.to_vec()).unwrap())]))
            .unwrap();
        (loss, g.backward().unwrap()["w"].data().to_vec())
    };
    assert_eq!(at(&mut g, [0.054, -0.055]).0, 0.0);
    let (_, grad) = at(&mut g, [0.0, 0.0]);
    assert!((grad[0] + 0.54).abs() < 1e-15);
    assert!((grad[1] - 0.11).abs() < 1e-15);
}

fn vec_strategy(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0f64..3.0, n)
}

proptest! {
    #[test]
    fn forward_is_deterministic(v in vec_strategy(5)) {
        let mut g = Graph::new();
        let x = g.parameter("x", &[5]).unwrap();
        let p = g.power(x, 1.5).unwrap();
        let r = g.relu(p).unwrap();
        let m = g.mean(r).unwrap();
        g.set_output(m).unwrap();
        let b: Bindings = HashMap::from([("x".into(), Tensor::vector(v).unwrap())]);
        let first = g.forward(b.clone()).unwrap();
        let second = g.forward(b).unwrap();
        prop_assert_eq!(first.to_bits(), second.to_bits());
    }

    /// The gradient of f + g equals the sum of the gradients of f and g.
    #[test]
    fn gradient_is_linear(v in vec_strategy(4)) {
        let build = |which: u8| {
            let mut g = Graph::new();
            let x = g.parameter("x", &[4]).unwrap();
            let f = {
                let s = g.square(x).unwrap();
                g.sum(s).unwrap()
            };
            let h = {
                let a = g.abs(x).unwrap();
                let p = g.power(a, 1.5).unwrap();
                g.mean(p).unwrap()
            };
            let out = match which {
                0 => f,
                1 => h,
                _ => g.add(f, h).unwrap(),
            };
            g.set_output(out).unwrap();
            g
        };
        let b: Bindings = HashMap::from([("x".into(), Tensor::vector(v).unwrap())]);
        let grad = |which| {
            let mut g = build(which);
            g.forward(b.clone()).unwrap();
            g.backward().unwrap()["x"].data().to_vec()
        };
        let (gf, gh, gs) = (grad(0), grad(1), grad(2));
        for i in 0..4 {
            prop_assert!((gf[i] + gh[i] - gs[i]).abs() <= 1e-12 * (1.0 + gs[i].abs()));
        }
    }

    /// Every node on a path from a trainable leaf to the output gets a
    /// gradient shaped like its value.
    #[test]
    fn gradient_shapes_match_values(rows in 1usize..4, cols in 1usize..4) {
        let mut g = Graph::new();
        let x = g.parameter("x", &[rows, cols]).unwrap();
        let b = g.parameter("b", &[cols]).unwrap();
        let z = g.add_bias(x, b).unwrap();
        let r = g.relu(z).unwrap();
        let s = g.sum(r).unwrap();
        g.set_output(s).unwrap();
        g.forward(HashMap::from([
            ("x".into(), Tensor::filled(&[rows, cols], 0.5)),
            ("b".into(), Tensor::filled(&[cols], -0.1)),
        ])).unwrap();
        g.backward().unwrap();
        for id in [x, b, z, r, s] {
            prop_assert_eq!(g.gradient(id).unwrap().shape(), g.value(id).unwrap().shape());
        }
    }
}
