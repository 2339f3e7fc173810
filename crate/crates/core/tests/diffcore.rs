use expres::gradcheck::finite_diff_check;
use expres::graph::Graph;
use expres::{Error, NodeId, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::trunc_normal(dims, 1.0, rng)
}

/// `Σ y ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn weighted_sum(g: &mut Graph, y: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let n: usize = g.dims(y).iter().product();
    let flat = g.reshape(y, &[1, n]).unwrap();
    let r = g.constant(&randn(&[n, 1], rng)).unwrap();
    g.matmul(flat, r).unwrap()
}

const PRIMITIVES: [&str; 15] = [
    "matmul", "add", "add_row", "mul", "scale", "concat", "chunk", "softmax", "masked_softmax", "layernorm", "gelu",
    "mean", "transpose", "resize", "cross_entropy",
];

/// Builds `loss(x)` through one primitive; `x` is the only trainable leaf.
fn build(op: &str, seed: u64) -> (Graph, NodeId) {
    let mut r = rng(seed);
    let mut g = Graph::new();
    let (a, b) = (2 + (seed % 3) as usize, 2 + (seed / 3 % 3) as usize);
    let xdims: Vec<usize> = match op {
        "resize" => vec![2, a, b],
        // Two-wide rows normalise to ±1 whatever the input, leaving
        // gradients too close to zero for a relative comparison.
        "layernorm" => vec![a, b + 1],
        _ => vec![a, b],
    };
    let x = g.param("x", &randn(&xdims, &mut r), true).unwrap();
    let y = match op {
        "matmul" => {
            let w = g.constant(&randn(&[b, 3], &mut r)).unwrap();
            g.matmul(x, w).unwrap()
        }
        "add" => {
            let c = g.constant(&randn(&xdims, &mut r)).unwrap();
            let s = g.add(x, c).unwrap();
            g.mul(s, x).unwrap()
        }
        "add_row" => {
            let row = g.param("row", &randn(&[b], &mut r), false).unwrap();
            let s = g.add_row(x, row).unwrap();
            g.mul(s, s).unwrap()
        }
        "mul" => g.mul(x, x).unwrap(),
        "scale" => g.scale(x, -1.75).unwrap(),
        "concat" => {
            let c = g.constant(&randn(&[1, b], &mut r)).unwrap();
            let cat = g.concat(&[x, c, x], 0).unwrap();
            g.mul(cat, cat).unwrap()
        }
        "chunk" => {
            let parts = g.chunk(x, 1, &[1, b - 1]).unwrap();
            let s = g.mul(parts[1], parts[1]).unwrap();
            let t = g.transpose(parts[0]).unwrap();
            let m = g.matmul(t, s).unwrap();
            g.mean(m, 0).unwrap()
        }
        "softmax" => g.softmax(x, 1.3).unwrap(),
        "masked_softmax" => {
            let mask: Vec<bool> = (0..a * b).map(|i| i % b == 0 || !(i * 7 + seed as usize).is_multiple_of(3)).collect();
            g.masked_softmax(x, 0.8, Some(std::sync::Arc::new(mask))).unwrap()
        }
        "layernorm" => {
            let gamma = g.param("gamma", &randn(&[b + 1], &mut r), false).unwrap();
            let beta = g.param("beta", &randn(&[b + 1], &mut r), false).unwrap();
            g.layernorm(x, gamma, beta).unwrap()
        }
        // The skip term keeps every coordinate's gradient away from gelu's
        // stationary point near -0.75, where relative error is meaningless.
        "gelu" => {
            let y = g.gelu(x).unwrap();
            g.add(y, x).unwrap()
        }
        "mean" => {
            let m = g.mean(x, (seed % 2) as usize).unwrap();
            g.mul(m, m).unwrap()
        }
        "transpose" => {
            let t = g.transpose(x).unwrap();
            let w = g.constant(&randn(&[a, 2], &mut r)).unwrap();
            let m = g.matmul(t, w).unwrap();
            g.mul(m, m).unwrap()
        }
        "resize" => g.resize(x, 3 + (seed % 2) as usize, 2 + (seed % 4) as usize).unwrap(),
        "cross_entropy" => {
            let targets: Vec<usize> = (0..a).map(|i| (i + seed as usize) % b).collect();
            return {
                let l = g.cross_entropy(x, &targets).unwrap();
                (g, l)
            };
        }
        other => unreachable!("{other}"),
    };
    let loss = weighted_sum(&mut g, y, &mut r);
    (g, loss)
}

#[test]
fn every_primitive_matches_central_differences_over_100_trials() {
    for op in PRIMITIVES {
        let mut worst = 0.0f32;
        for seed in 0..100 {
            let (mut g, loss) = build(op, seed);
            worst = worst.max(finite_diff_check(&mut g, loss, "x", 1e-3).unwrap());
        }
        assert!(worst < 1e-3, "{op}: max relative error {worst}");
    }
}

#[test]
fn softmax_cross_entropy_gradient_at_equal_logits() {
    let mut g = Graph::new();
    let x = g.param("x", &Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap(), true).unwrap();
    let l = g.cross_entropy(x, &[0]).unwrap();
    let grad = g.gradient(l, &["x"]).unwrap();
    assert_eq!(grad["x"].data(), &[-0.5, 0.5]);
}

#[test]
fn frozen_names_and_interior_nodes_cannot_be_differentiated() {
    let mut g = Graph::new();
    let w = g.param("w", &Tensor::from_vec(vec![1.0, 2.0]), false).unwrap();
    let x = g.param("x", &Tensor::from_vec(vec![3.0, 4.0]), true).unwrap();
    let y = g.mul(w, x).unwrap();
    let l = g.mean(y, 0).unwrap();
    assert!(matches!(g.gradient(l, &["w"]), Err(Error::Contract(_))));
    assert!(matches!(g.gradient(l, &["nope"]), Err(Error::Contract(_))));
    assert!(matches!(finite_diff_check(&mut g, l, "w", 1e-3), Err(Error::Contract(_))));
}

#[test]
fn evaluation_and_gradients_are_bit_reproducible() {
    let run = || {
        let (g, loss) = build("layernorm", 17);
        (g.value(loss), g.gradient_all(loss).unwrap())
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..9, temp in 0.1f64..5.0) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.input("x", &Tensor::trunc_normal(&[rows, cols], 3.0, &mut r)).unwrap();
        let y = g.softmax(x, temp).unwrap();
        let v = g.value(y);
        for i in 0..rows {
            let s: f64 = v.row(i).iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_standardises_each_token(seed in any::<u64>(), rows in 1usize..5, cols in 2usize..17) {
        let mut r = rng(seed);
        let mut g = Graph::new();
        let x = g.input("x", &Tensor::trunc_normal(&[rows, cols], 4.0, &mut r)).unwrap();
        let one = g.constant(&Tensor::full(&[cols], 1.0)).unwrap();
        let zero = g.constant(&Tensor::zeros(&[cols])).unwrap();
        let y = g.layernorm(x, one, zero).unwrap();
        let v = g.value(y);
        for i in 0..rows {
            let row: Vec<f64> = v.row(i).iter().map(|&p| p as f64).collect();
            let mu = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|p| (p - mu) * (p - mu)).sum::<f64>() / cols as f64;
            prop_assert!(mu.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn chunk_undoes_concat(seed in any::<u64>(), axis in 0usize..2, a in 1usize..4, b in 1usize..4, other in 1usize..4) {
        let mut r = rng(seed);
        let (da, db) = if axis == 0 { (vec![a, other], vec![b, other]) } else { (vec![other, a], vec![other, b]) };
        let (ta, tb) = (Tensor::trunc_normal(&da, 1.0, &mut r), Tensor::trunc_normal(&db, 1.0, &mut r));
        let mut g = Graph::new();
        let na = g.input("a", &ta).unwrap();
        let nb = g.input("b", &tb).unwrap();
        let cat = g.concat(&[na, nb], axis).unwrap();
        let parts = g.chunk(cat, axis, &[a, b]).unwrap();
        prop_assert_eq!(g.value(parts[0]), ta);
        prop_assert_eq!(g.value(parts[1]), tb);
    }
}
