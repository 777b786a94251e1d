use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::from_vec(r, c, data).unwrap()
}

/// Generic per-op gradient check: build a loss through `f` over the given
/// parameter shapes and compare against central differences.
fn op_gradcheck<F>(shapes: &[(usize, usize)], seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        store
            .add(&format!("p{}", i), rand_tensor(&mut rng, r, c))
            .unwrap();
    }
    finite_diff_check(f, &store, 1e-5).unwrap()
}

#[test]
fn add_matches_definition() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
    let b = tape.constant(Tensor::row(vec![3.0, 4.0])).unwrap();
    let c = tape.add(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
}

#[test]
fn sigmoid_symmetry_point() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(0.0)).unwrap();
    let s = tape.sigmoid(a).unwrap();
    assert_eq!(tape.value(s).item(), 0.5);
}

#[test]
fn masked_softmax_uniform_case() {
    let mut tape = Tape::new();
    let scores = tape.constant(Tensor::col(vec![0.0, 0.0, 5.0])).unwrap();
    let segs = Arc::new(vec![0, 0, 0]);
    let allowed = Arc::new(vec![true, true, false]);
    let w = tape.segment_softmax(scores, segs, allowed, 1).unwrap();
    assert_eq!(tape.value(w).data(), &[0.5, 0.5, 0.0]);
}

#[test]
fn backprop_square_sum() {
    let mut store = ParamStore::new();
    store
        .add("x", Tensor::row(vec![1.0, 2.0, 3.0]))
        .unwrap();
    let mut tape = Tape::new();
    let vars = store.inject(&mut tape).unwrap();
    let sq = tape.mul(vars[0], vars[0]).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    store.accumulate(&tape, &vars, loss).unwrap();
    assert_eq!(store.grad(0).data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn grads_accumulate_until_zeroed() {
    let mut store = ParamStore::new();
    store.add("x", Tensor::scalar(3.0)).unwrap();
    for _ in 0..2 {
        let mut tape = Tape::new();
        let vars = store.inject(&mut tape).unwrap();
        let sq = tape.mul(vars[0], vars[0]).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        store.accumulate(&tape, &vars, loss).unwrap();
    }
    assert_eq!(store.grad(0).item(), 12.0);
    store.zero_grad();
    assert_eq!(store.grad(0).item(), 0.0);
}

#[test]
fn detach_blocks_gradient_and_keeps_value() {
    let mut store = ParamStore::new();
    store.add("x", Tensor::row(vec![1.5, -2.0])).unwrap();
    let mut tape = Tape::new();
    let vars = store.inject(&mut tape).unwrap();
    let d = tape.detach(vars[0]).unwrap();
    assert_eq!(tape.value(d).data(), store.value(0).data());
    let sq = tape.mul(d, d).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    store.accumulate(&tape, &vars, loss).unwrap();
    assert_eq!(store.grad(0).data(), &[0.0, 0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::row(vec![1.0, 2.0])).unwrap();
    assert!(tape.backward(a).is_err());
}

#[test]
fn non_finite_output_is_hard_error() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::scalar(1.0)).unwrap();
    let b = tape.constant(Tensor::scalar(0.0)).unwrap();
    assert!(tape.div(a, b).is_err());
}

#[test]
fn matmul_grad_matches_finite_differences() {
    let err = op_gradcheck(&[(3, 3), (3, 2)], 1, |tape, v| {
        let c = tape.matmul(v[0], v[1])?;
        tape.mean_all(c)
    });
    assert!(err < 1e-7, "rel err {}", err);
}

#[test]
fn broadcast_binary_grads() {
    for seed in 0..4u64 {
        let err = op_gradcheck(&[(3, 4), (1, 4), (3, 1)], seed, |tape, v| {
            let b = tape.add_scalar(v[1], 2.0)?; // keep divisor away from 0
            let x = tape.mul(v[0], v[2])?;
            let y = tape.div(x, b)?;
            let z = tape.sub(y, v[0])?;
            tape.mean_all(z)
        });
        assert!(err < 1e-6, "seed {} rel err {}", seed, err);
    }
}

#[test]
fn unary_op_grads() {
    let err = op_gradcheck(&[(2, 5)], 7, |tape, v| {
        let a = tape.silu(v[0])?;
        let b = tape.sigmoid(a)?;
        let c = tape.exp(b)?;
        let d = tape.softplus(c)?;
        let e = tape.add_scalar(d, 1.0)?;
        let f = tape.sqrt(e)?;
        tape.mean_all(f)
    });
    assert!(err < 1e-6, "rel err {}", err);
}

#[test]
fn reduction_and_layout_op_grads() {
    let err = op_gradcheck(&[(3, 6)], 11, |tape, v| {
        let m0 = tape.mean_axis(v[0], 0)?;
        let m1 = tape.mean_axis(v[0], 1)?;
        let s = tape.sum_axis(v[0], 1)?;
        let rep = tape.repeat_interleave_cols(m1, 3)?;
        let grp = tape.sum_cols_grouped(v[0], 2)?;
        let sl = tape.slice_cols(v[0], 1, 3)?;
        let cat = tape.concat_cols(&[m1, s, grp, sl])?;
        let a = tape.sum_all(cat)?;
        let b = tape.sum_all(rep)?;
        let c = tape.sum_all(m0)?;
        let ab = tape.add(a, b)?;
        tape.add(ab, c)
    });
    assert!(err < 1e-6, "rel err {}", err);
}

#[test]
fn gather_scatter_grads_and_permutation_invariance() {
    let idx = Arc::new(vec![2usize, 0, 1, 0]);
    let err = op_gradcheck(&[(3, 2)], 13, |tape, v| {
        let g = tape.gather_rows(v[0], idx.clone())?;
        let s = tape.scatter_add_rows(g, idx.clone(), 3)?;
        let sq = tape.mul(s, s)?;
        tape.mean_all(sq)
    });
    assert!(err < 1e-6, "rel err {}", err);

    // scatter-add result invariant to edge ordering
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let vals = rand_tensor(&mut rng, 4, 3);
    let idx_a = vec![1usize, 0, 1, 2];
    let perm = vec![2usize, 0, 3, 1];
    let mut tape = Tape::new();
    let a = tape.constant(vals.clone()).unwrap();
    let out_a = tape.scatter_add_rows(a, Arc::new(idx_a.clone()), 3).unwrap();
    let permuted =
        Tensor::from_vec(4, 3, perm.iter().flat_map(|&p| vals.row_slice(p).to_vec()).collect())
            .unwrap();
    let idx_b: Vec<usize> = perm.iter().map(|&p| idx_a[p]).collect();
    let b = tape.constant(permuted).unwrap();
    let out_b = tape.scatter_add_rows(b, Arc::new(idx_b), 3).unwrap();
    for (x, y) in tape.value(out_a).data().iter().zip(tape.value(out_b).data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn segment_op_grads() {
    let segs = Arc::new(vec![0usize, 0, 1, 1, 1]);
    let mask = Arc::new(vec![true, false, true, true, false]);
    let err = op_gradcheck(&[(5, 3), (5, 1)], 17, |tape, v| {
        let m = tape.segment_mean_masked(v[0], segs.clone(), mask.clone(), 2)?;
        let w = tape.segment_softmax(v[1], segs.clone(), mask.clone(), 2)?;
        let xw = tape.mul(v[0], w)?;
        let s = tape.segment_sum(xw, segs.clone(), 2)?;
        let t = tape.add(m, s)?;
        let sq = tape.mul(t, t)?;
        tape.mean_all(sq)
    });
    assert!(err < 1e-6, "rel err {}", err);
}

#[test]
fn channel_matmul_and_tensor_contract_grads() {
    // a small dense 3x3x3 coefficient block exercises the fused op
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let cvals: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let cg = Arc::new(Coeff3::from_dense(3, 3, 3, &cvals));
    let (m_in, m_out) = (2usize, 3usize);
    let err = op_gradcheck(
        &[(4, 2 * 3), (4, 3), (4, 2 * 3), (3, 4)],
        29,
        |tape, v| {
            let t = tape.tensor_contract(v[0], v[1], v[2], cg.clone(), m_in, m_out, 0.7)?;
            let cm = tape.channel_matmul(t, v[3], 3)?;
            let sq = tape.mul(cm, cm)?;
            tape.mean_all(sq)
        },
    );
    assert!(err < 1e-6, "rel err {}", err);
}

#[test]
fn finite_diff_check_exact_quadratic() {
    let mut store = ParamStore::new();
    store.add("x", Tensor::scalar(3.0)).unwrap();
    let err = finite_diff_check(
        |tape, v| {
            let sq = tape.mul(v[0], v[0])?;
            tape.sum_all(sq)
        },
        &store,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-9, "rel err {}", err);
}

#[test]
fn finite_diff_check_constant_function() {
    let mut store = ParamStore::new();
    store.add("x", Tensor::row(vec![1.0, 2.0])).unwrap();
    let err = finite_diff_check(
        |tape, _v| tape.constant(Tensor::scalar(4.0)),
        &store,
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn abs_and_mean_grads() {
    let err = op_gradcheck(&[(2, 3)], 31, |tape, v| {
        let shifted = tape.add_scalar(v[0], 3.0)?; // keep away from the kink
        let a = tape.abs(shifted)?;
        tape.mean_all(a)
    });
    assert!(err < 1e-6, "rel err {}", err);
}
