use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn single(graph: &Graph, leaf: NodeId, value: Array) -> LeafValues {
    let _ = graph;
    LeafValues::from([(leaf, value)])
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    Array::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Reduces `node` to a scalar through a fixed random weighting so that every
/// output entry influences the result differently.
fn weighted_sum(g: &mut Graph, node: NodeId, rng: &mut ChaCha8Rng) -> NodeId {
    let shape = g.shape(node).to_vec();
    let w = g.constant(random_array(rng, &shape, -1.0, 1.0));
    let prod = g.mul(node, w).unwrap();
    g.sum(prod).unwrap()
}

#[test]
fn square_value_and_gradient() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[], true);
    let y = g.mul(x, x).unwrap();
    let leaves = single(&g, x, Array::scalar(3.0));
    let values = evaluate(&g, &leaves).unwrap();
    assert_eq!(values.scalar(y), 9.0);
    let grads = backward(&g, &values, y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 6.0);
}

#[test]
fn sigmoid_value_and_gradient_at_zero() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[], true);
    let y = g.sigmoid(x).unwrap();
    let values = evaluate(&g, &single(&g, x, Array::scalar(0.0))).unwrap();
    assert_eq!(values.scalar(y), 0.5);
    let grads = backward(&g, &values, y).unwrap();
    assert_eq!(grads.get(x).unwrap().item(), 0.25);
}

#[test]
fn matmul_shape_rule() {
    let mut g = Graph::new();
    let a = g.leaf("a", &[2, 3], true);
    let b = g.leaf("b", &[3, 4], true);
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.shape(c), &[2, 4]);
    assert!(g.matmul(b, a).is_err());
}

#[test]
fn matmul_values() {
    let mut g = Graph::new();
    let a = g.leaf("a", &[2, 2], false);
    let b = g.leaf("b", &[2, 1], false);
    let c = g.matmul(a, b).unwrap();
    let leaves = LeafValues::from([
        (a, Array::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()),
        (b, Array::new(vec![2, 1], vec![5.0, 6.0]).unwrap()),
    ]);
    let values = evaluate(&g, &leaves).unwrap();
    assert_eq!(values.get(c).data(), &[17.0, 39.0]);
}

#[test]
fn quadratic_graph_finite_differences_are_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.leaf("x", &[5], true);
    let sq = g.mul(x, x).unwrap();
    let out = weighted_sum(&mut g, sq, &mut rng);
    let leaves = single(&g, x, random_array(&mut rng, &[5], -2.0, 2.0));
    let err = finite_difference_check(&g, &leaves, out, x, 1e-5).unwrap();
    assert!(err < 1e-8, "error {err}");
}

#[test]
fn tanh_chain_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.leaf("x", &[6], true);
    let mut h = x;
    for _ in 0..4 {
        h = g.tanh(h).unwrap();
        h = g.affine(h, 1.7, 0.2).unwrap();
    }
    let out = weighted_sum(&mut g, h, &mut rng);
    let leaves = single(&g, x, random_array(&mut rng, &[6], -1.5, 1.5));
    let err = finite_difference_check(&g, &leaves, out, x, 1e-5).unwrap();
    assert!(err < 1e-6, "error {err}");
}

#[test]
fn zero_constant_graph_has_zero_error() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[3], true);
    let zero = g.constant(Array::zeros(&[3]));
    let prod = g.mul(x, zero).unwrap();
    let out = g.sum(prod).unwrap();
    let leaves = single(&g, x, Array::vector(vec![1.0, -2.0, 0.5]));
    assert_eq!(finite_difference_check(&g, &leaves, out, x, 1e-5).unwrap(), 0.0);
}

#[test]
fn non_scalar_output_is_rejected() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[2], true);
    let y = g.tanh(x).unwrap();
    let values = evaluate(&g, &single(&g, x, Array::vector(vec![0.1, 0.2]))).unwrap();
    assert!(matches!(backward(&g, &values, y), Err(DiffError::NotScalar { .. })));
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[], true);
    let unused = g.leaf("unused", &[2, 2], true);
    let y = g.exp(x).unwrap();
    let leaves = LeafValues::from([(x, Array::scalar(0.0)), (unused, Array::zeros(&[2, 2]))]);
    let values = evaluate(&g, &leaves).unwrap();
    let grads = backward(&g, &values, y).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &Array::zeros(&[2, 2]));
    assert_eq!(grads.get(x).unwrap().item(), 1.0);
}

#[test]
fn leaf_shape_and_presence_are_checked() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[3], true);
    let _ = g.sum(x).unwrap();
    assert!(matches!(
        evaluate(&g, &LeafValues::new()),
        Err(DiffError::MissingLeaf(_))
    ));
    let wrong = single(&g, x, Array::zeros(&[4]));
    assert!(matches!(evaluate(&g, &wrong), Err(DiffError::ShapeMismatch(_))));
}

#[test]
fn non_finite_intermediate_is_an_error() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[], true);
    let y = g.log(x).unwrap();
    let err = evaluate(&g, &single(&g, x, Array::scalar(-1.0))).unwrap_err();
    assert!(matches!(err, DiffError::NonFinite { node, op: "log" } if node == y));
}

#[test]
fn clamp_gradient_vanishes_outside_interval() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[3], true);
    let c = g.clamp(x, -1.0, 1.0).unwrap();
    let out = g.sum(c).unwrap();
    let values = evaluate(&g, &single(&g, x, Array::vector(vec![-3.0, 0.5, 2.0]))).unwrap();
    assert_eq!(values.scalar(out), -1.0 + 0.5 + 1.0);
    let grads = backward(&g, &values, out).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn constant_subgraphs_are_folded() {
    let mut g = Graph::new();
    let a = g.constant(Array::vector(vec![1.0, 2.0]));
    let b = g.constant(Array::vector(vec![3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    assert!(g.is_constant(c));
    let x = g.leaf("x", &[2], true);
    let d = g.mul(c, x).unwrap();
    assert!(!g.is_constant(d));
    let values = evaluate(&g, &single(&g, x, Array::vector(vec![1.0, 1.0]))).unwrap();
    assert_eq!(values.get(d).data(), &[4.0, 6.0]);
}

#[test]
fn cumsum_exclusive_values() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[2, 3], false);
    let y = g.cumsum_exclusive(x).unwrap();
    let leaves = single(
        &g,
        x,
        Array::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
    );
    let values = evaluate(&g, &leaves).unwrap();
    assert_eq!(values.get(y).data(), &[0.0, 1.0, 3.0, 0.0, 4.0, 9.0]);
}

#[test]
fn broadcasting_patterns_forward() {
    let mut g = Graph::new();
    let a = g.leaf("a", &[2, 3], false);
    let row = g.leaf("row", &[3], false);
    let col = g.leaf("col", &[2, 1], false);
    let s = g.add(a, row).unwrap();
    let t = g.mul(s, col).unwrap();
    let leaves = LeafValues::from([
        (a, Array::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap()),
        (row, Array::vector(vec![10.0, 20.0, 30.0])),
        (col, Array::new(vec![2, 1], vec![1.0, -1.0]).unwrap()),
    ]);
    let values = evaluate(&g, &leaves).unwrap();
    assert_eq!(values.get(t).data(), &[10.0, 21.0, 32.0, -13.0, -24.0, -35.0]);
}

/// Builds a random graph exercising one op and returns `(graph, leaf values,
/// output, leaves)`.
fn op_case(op: usize, rng: &mut ChaCha8Rng) -> (Graph, LeafValues, NodeId, Vec<NodeId>) {
    let mut g = Graph::new();
    let mut leaves = LeafValues::new();
    let mut leaf = |g: &mut Graph, shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        let id = g.leaf(format!("l{}", g.len()), shape, true);
        leaves.insert(id, random_array(rng, shape, lo, hi));
        id
    };
    let node = match op {
        0 => {
            let a = leaf(&mut g, &[3, 4], -1.0, 1.0, rng);
            let b = leaf(&mut g, &[4], -1.0, 1.0, rng);
            g.add(a, b).unwrap()
        }
        1 => {
            let a = leaf(&mut g, &[3, 1], -1.0, 1.0, rng);
            let b = leaf(&mut g, &[3, 4], -1.0, 1.0, rng);
            g.sub(a, b).unwrap()
        }
        2 => {
            let a = leaf(&mut g, &[2, 3, 2], -1.0, 1.0, rng);
            let b = leaf(&mut g, &[3, 1], -1.0, 1.0, rng);
            g.mul(a, b).unwrap()
        }
        3 => {
            let a = leaf(&mut g, &[3, 5], -1.0, 1.0, rng);
            let b = leaf(&mut g, &[5, 2], -1.0, 1.0, rng);
            g.matmul(a, b).unwrap()
        }
        4 => {
            let x = leaf(&mut g, &[4, 3], -1.0, 1.0, rng);
            let w = leaf(&mut g, &[3, 2], -1.0, 1.0, rng);
            let b = leaf(&mut g, &[2], -1.0, 1.0, rng);
            g.linear(x, w, b).unwrap()
        }
        5 => {
            let a = leaf(&mut g, &[3], -1.0, 1.0, rng);
            g.broadcast(a, &[2, 3]).unwrap()
        }
        6 => {
            let a = leaf(&mut g, &[2, 6], -1.0, 1.0, rng);
            g.reshape(a, &[3, 4]).unwrap()
        }
        7 => {
            let a = leaf(&mut g, &[2, 3], -1.0, 1.0, rng);
            let b = leaf(&mut g, &[2, 2], -1.0, 1.0, rng);
            g.concat(&[a, b], 1).unwrap()
        }
        8 => {
            let a = leaf(&mut g, &[3, 4], -1.0, 1.0, rng);
            let s = g.mean(a).unwrap();
            let t = g.sum(a).unwrap();
            let st = g.mul(s, t).unwrap();
            g.add(a, st).unwrap()
        }
        9 => {
            let a = leaf(&mut g, &[2, 3, 4], -1.0, 1.0, rng);
            g.sum_axis(a, 1).unwrap()
        }
        10 => {
            let a = leaf(&mut g, &[5], -2.0, 2.0, rng);
            g.tanh(a).unwrap()
        }
        11 => {
            let a = leaf(&mut g, &[5], -4.0, 4.0, rng);
            g.sigmoid(a).unwrap()
        }
        12 => {
            let a = leaf(&mut g, &[5], -4.0, 4.0, rng);
            g.softplus(a).unwrap()
        }
        13 => {
            let a = leaf(&mut g, &[5], -2.0, 2.0, rng);
            g.exp(a).unwrap()
        }
        14 => {
            let a = leaf(&mut g, &[5], 0.2, 3.0, rng);
            g.log(a).unwrap()
        }
        15 => {
            // Values kept away from the clamp bounds and from the kink of abs.
            let a = leaf(&mut g, &[6], 0.1, 0.9, rng);
            let signs = g.constant(Array::vector(vec![1.0, -1.0, 3.0, -3.0, 1.0, -1.0]));
            let s = g.mul(a, signs).unwrap();
            let c = g.clamp(s, -1.0, 1.0).unwrap();
            g.abs(c).unwrap()
        }
        16 => {
            let a = leaf(&mut g, &[5], -3.0, 3.0, rng);
            let s = g.sin(a).unwrap();
            let c = g.cos(a).unwrap();
            g.mul(s, c).unwrap()
        }
        17 => {
            let a = leaf(&mut g, &[3, 5], -1.0, 1.0, rng);
            g.cumsum_exclusive(a).unwrap()
        }
        18 => {
            let matrix = Arc::new(SparseMatrix::from_rows(
                4,
                vec![vec![(0, 0.5), (3, -1.0)], vec![], vec![(1, 2.0), (2, 0.25), (0, 1.0)]],
            ));
            let a = leaf(&mut g, &[4, 2], -1.0, 1.0, rng);
            g.sparse_matmul(matrix, a).unwrap()
        }
        19 => {
            let a = leaf(&mut g, &[4], -1.0, 1.0, rng);
            g.affine(a, -2.5, 0.75).unwrap()
        }
        20 => {
            let x = leaf(&mut g, &[4, 3], -1.0, 1.0, rng);
            let w = leaf(&mut g, &[3, 2], -1.0, 1.0, rng);
            let b = leaf(&mut g, &[2], -1.0, 1.0, rng);
            g.linear_tanh(x, w, b).unwrap()
        }
        21 => {
            let a = leaf(&mut g, &[4, 3], -1.0, 1.0, rng);
            let b = leaf(&mut g, &[1, 3], -1.0, 1.0, rng);
            g.add_tanh(a, b).unwrap()
        }
        _ => unreachable!(),
    };
    let out = weighted_sum(&mut g, node, rng);
    let ids = g.differentiable_leaves();
    (g, leaves, out, ids)
}

const OP_CASES: usize = 22;

#[test]
fn every_op_matches_finite_differences_over_seeds() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for op in 0..OP_CASES {
            let (g, leaves, out, ids) = op_case(op, &mut rng);
            for leaf in ids {
                let err = finite_difference_check(&g, &leaves, out, leaf, 1e-5).unwrap();
                assert!(err < 1e-5, "op case {op}, seed {seed}, leaf {leaf}: error {err}");
            }
        }
    }
}

#[test]
fn fused_ops_equal_their_compositions() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.constant(random_array(&mut rng, &[5, 3], -2.0, 2.0));
    let w = g.constant(random_array(&mut rng, &[3, 4], -2.0, 2.0));
    let b = g.constant(random_array(&mut rng, &[4], -2.0, 2.0));
    let fused = g.linear_tanh(x, w, b).unwrap();
    let lin = g.linear(x, w, b).unwrap();
    let plain = g.tanh(lin).unwrap();
    let row = g.constant(random_array(&mut rng, &[1, 4], -2.0, 2.0));
    let fused_add = g.add_tanh(plain, row).unwrap();
    let sum = g.add(plain, row).unwrap();
    let plain_add = g.tanh(sum).unwrap();
    let values = evaluate(&g, &LeafValues::new()).unwrap();
    assert_eq!(values.get(fused).data(), values.get(plain).data());
    assert_eq!(values.get(fused_add).data(), values.get(plain_add).data());
    assert!(g.add_tanh(row, plain).is_err());
}

#[test]
fn backward_is_linear_in_the_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut g = Graph::new();
    let x = g.leaf("x", &[4, 3], true);
    let w = g.constant(random_array(&mut rng, &[3, 2], -1.0, 1.0));
    let h = g.matmul(x, w).unwrap();
    let th = g.tanh(h).unwrap();
    let f = weighted_sum(&mut g, th, &mut rng);
    let ex = g.sigmoid(x).unwrap();
    let gg = weighted_sum(&mut g, ex, &mut rng);
    let (a, b) = (0.7, -1.9);
    let fa = g.scale(f, a).unwrap();
    let gb = g.scale(gg, b).unwrap();
    let combo = g.add(fa, gb).unwrap();
    let leaves = single(&g, x, random_array(&mut rng, &[4, 3], -1.0, 1.0));
    let values = evaluate(&g, &leaves).unwrap();
    let gf = backward(&g, &values, f).unwrap().take(x).unwrap();
    let ggr = backward(&g, &values, gg).unwrap().take(x).unwrap();
    let gc = backward(&g, &values, combo).unwrap().take(x).unwrap();
    for i in 0..gc.len() {
        let expected = a * gf.data()[i] + b * ggr.data()[i];
        assert!((gc.data()[i] - expected).abs() < 1e-12);
    }
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (g, leaves, out, ids) = op_case(4, &mut rng);
    let first = backward(&g, &evaluate(&g, &leaves).unwrap(), out).unwrap();
    for _ in 0..3 {
        let again = backward(&g, &evaluate(&g, &leaves).unwrap(), out).unwrap();
        for &leaf in &ids {
            let (a, b) = (first.get(leaf).unwrap(), again.get(leaf).unwrap());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }
}

#[test]
fn backward_wrt_subset_skips_other_leaves() {
    let mut g = Graph::new();
    let x = g.leaf("x", &[], true);
    let y = g.leaf("y", &[], true);
    let p = g.mul(x, y).unwrap();
    let leaves = LeafValues::from([(x, Array::scalar(2.0)), (y, Array::scalar(5.0))]);
    let values = evaluate(&g, &leaves).unwrap();
    let grads = backward_wrt(&g, &values, p, &[y]).unwrap();
    assert_eq!(grads.get(y).unwrap().item(), 2.0);
    assert!(grads.get(x).is_none());
}

mod props {
    use proptest::prelude::*;

    use super::super::*;

    proptest! {
        #[test]
        fn reshape_round_trip_preserves_data(data in proptest::collection::vec(-1e3f64..1e3, 12)) {
            let a = Array::new(vec![3, 4], data.clone()).unwrap();
            let b = a.clone().reshaped(&[2, 6]).unwrap().reshaped(&[3, 4]).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn broadcast_then_sum_axis_scales(data in proptest::collection::vec(-10f64..10.0, 4), reps in 1usize..5) {
            let mut g = Graph::new();
            let x = g.leaf("x", &[4], false);
            let b = g.broadcast(x, &[reps, 4]).unwrap();
            let s = g.sum_axis(b, 0).unwrap();
            let values = evaluate(&g, &LeafValues::from([(x, Array::vector(data.clone()))])).unwrap();
            for (got, want) in values.get(s).data().iter().zip(&data) {
                prop_assert!((got - want * reps as f64).abs() < 1e-9);
            }
        }
    }
}
