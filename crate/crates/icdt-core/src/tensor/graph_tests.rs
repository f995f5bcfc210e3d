use super::finite_diff;
use super::{Graph, NodeId, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks backward against central finite differences for a graph builder.
/// The loss is a randomly weighted sum of the builder output so every output
/// element influences the scalar.
fn grad_check<E: Scalar>(
    build: impl Fn(&mut Graph<E>, &[NodeId]) -> NodeId,
    inputs: &[Tensor<E>],
    step: f64,
    tol: f64,
) {
    let mut weights_rng = rng(0x5eed);
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build(&mut g, &ids);
        g.value(out).shape().to_vec()
    };
    let w = Tensor::<E>::randn(out_shape, &mut weights_rng);

    // analytic gradients
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &ids);
    let wid = g.constant(w.clone());
    let weighted = g.mul(out, wid).unwrap();
    let loss = g.sum_all(weighted);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("leaf gradient").to_f64_vec())
        .collect();

    // finite differences (forward evaluations only)
    let numeric = finite_diff::gradients(
        |xs: &[Tensor<E>]| {
            let mut g = Graph::new();
            let ids: Vec<_> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let out = build(&mut g, &ids);
            let wid = g.constant(w.clone());
            let weighted = g.mul(out, wid).unwrap();
            let loss = g.sum_all(weighted);
            g.value(loss).item().as_f64()
        },
        inputs,
        step,
    );

    let mut probes = 0usize;
    for (a, n) in analytic.iter().zip(&numeric) {
        probes += a.len();
        let err = finite_diff::max_relative_error(a, n, 1e-6);
        assert!(
            err < tol,
            "gradient mismatch: max rel err {err:.3e} (tol {tol:.1e})\nanalytic: {a:?}\nnumeric:  {n:?}"
        );
    }
    assert!(probes > 0);
}

fn randn<E: Scalar>(shape: &[usize], seed: u64) -> Tensor<E> {
    Tensor::randn(shape.to_vec(), &mut rng(seed))
}

#[test]
fn matmul_identity_passthrough() {
    let mut g = Graph::<f64>::new();
    let eye = g.constant(Tensor::from_vec(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let m = g.constant(Tensor::from_vec(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
    let out = g.matmul(eye, m).unwrap();
    assert_eq!(g.value(out).data(), &[1., 2., 3., 4., 5., 6.]);
}

#[test]
fn matmul_hand_example() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::from_vec(vec![2, 2], vec![1., 2., 3., 4.]).unwrap());
    let b = g.constant(Tensor::from_vec(vec![2, 1], vec![1., 1.]).unwrap());
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).shape(), &[2, 1]);
    assert_eq!(g.value(out).data(), &[3., 7.]);
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![4, 2]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    // gradient of sum(A@B) for random 5x4 @ 4x3
    let a = randn::<f64>(&[5, 4], 1);
    let b = randn::<f64>(&[4, 3], 2);
    grad_check(
        |g, ids| g.matmul(ids[0], ids[1]).unwrap(),
        &[a, b],
        1e-5,
        1e-5,
    );
}

#[test]
fn layernorm_constant_row_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full(vec![2, 4], 3.25));
    let y = g.layernorm(x, 1e-6).unwrap();
    for &v in g.value(y).data() {
        assert_eq!(v, 0.0);
    }
}

#[test]
fn layernorm_already_normalized_row() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_vec(vec![1, 2], vec![1.0, -1.0]).unwrap());
    let y = g.layernorm(x, 1e-6).unwrap();
    let expected = 1.0 / (1.0 + 1e-6_f64).sqrt();
    assert!((g.value(y).data()[0] - expected).abs() < 1e-12);
    assert!((g.value(y).data()[1] + expected).abs() < 1e-12);
}

#[test]
fn layernorm_rows_are_standardized() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(randn::<f64>(&[3, 8], 3));
    let y = g.layernorm(x, 1e-6).unwrap();
    let v = g.value(y);
    for r in 0..3 {
        let row = &v.data()[r * 8..(r + 1) * 8];
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-6, "row mean {mean}");
        assert!((var - 1.0).abs() < 1e-4, "row var {var}");
    }
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    let x = randn::<f64>(&[3, 6], 4);
    grad_check(|g, ids| g.layernorm(ids[0], 1e-6).unwrap(), &[x], 1e-5, 1e-5);
}

#[test]
fn attention_single_token_returns_v() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(randn::<f64>(&[2, 1, 4], 5));
    let k = g.constant(randn::<f64>(&[2, 1, 4], 6));
    let v_t = randn::<f64>(&[2, 1, 4], 7);
    let v = g.constant(v_t.clone());
    let out = g.attention(q, k, v).unwrap();
    for (o, e) in g.value(out).data().iter().zip(v_t.data()) {
        assert!((o - e).abs() < 1e-12);
    }
}

#[test]
fn attention_zero_query_averages_values() {
    let mut g = Graph::<f64>::new();
    let q = g.constant(Tensor::zeros(vec![1, 4, 3]));
    let k = g.constant(randn::<f64>(&[1, 4, 3], 8));
    let v_t = randn::<f64>(&[1, 4, 3], 9);
    let v = g.constant(v_t.clone());
    let out = g.attention(q, k, v).unwrap();
    for c in 0..3 {
        let mean = (0..4).map(|j| v_t.data()[j * 3 + c]).sum::<f64>() / 4.0;
        for i in 0..4 {
            assert!((g.value(out).data()[i * 3 + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_gradient_matches_finite_differences() {
    // h=2, S=4, dh=8 per the op contract
    let q = randn::<f64>(&[2, 4, 8], 10);
    let k = randn::<f64>(&[2, 4, 8], 11);
    let v = randn::<f64>(&[2, 4, 8], 12);
    grad_check(
        |g, ids| g.attention(ids[0], ids[1], ids[2]).unwrap(),
        &[q, k, v],
        1e-5,
        1e-4,
    );
}

#[test]
fn silu_at_zero_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.silu(x);
    assert_eq!(g.value(y).item(), 0.0);
}

#[test]
fn concat_channels_doubles_channel_extent() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(vec![32, 32, 4]));
    let b = g.constant(Tensor::zeros(vec![32, 32, 4]));
    let c = g.concat_last(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[32, 32, 8]);
}

#[test]
fn concat_then_slice_recovers_inputs() {
    let mut g = Graph::<f64>::new();
    let at = randn::<f64>(&[2, 2, 3], 13);
    let bt = randn::<f64>(&[2, 2, 2], 14);
    let a = g.constant(at.clone());
    let b = g.constant(bt.clone());
    let c = g.concat_last(a, b).unwrap();
    let a2 = g.slice_last(c, 0, 3).unwrap();
    let b2 = g.slice_last(c, 3, 2).unwrap();
    assert_eq!(g.value(a2).data(), at.data());
    assert_eq!(g.value(b2).data(), bt.data());
}

#[test]
fn gelu_gradient_matches_finite_differences() {
    let x = randn::<f64>(&[4, 7], 15);
    grad_check(|g, ids| g.gelu(ids[0]), &[x], 1e-5, 1e-5);
}

#[test]
fn elementwise_and_reduction_gradients_f64() {
    // >= 100 probes across the differentiable elementwise suite, 64-bit
    let tol = 1e-5;
    let step = 1e-5;
    let x = randn::<f64>(&[6, 9], 16); // 54 probes per input, 108 per binary op
    let y = randn::<f64>(&[6, 9], 17);
    grad_check(|g, ids| g.add(ids[0], ids[1]).unwrap(), &[x.clone(), y.clone()], step, tol);
    grad_check(|g, ids| g.sub(ids[0], ids[1]).unwrap(), &[x.clone(), y.clone()], step, tol);
    grad_check(|g, ids| g.mul(ids[0], ids[1]).unwrap(), &[x.clone(), y.clone()], step, tol);
    grad_check(|g, ids| g.silu(ids[0]), &[x.clone()], step, tol);
    grad_check(|g, ids| g.gelu(ids[0]), &[x.clone()], step, tol);
    grad_check(|g, ids| g.exp(ids[0]), &[x.clone()], step, tol);
    grad_check(|g, ids| g.mul_scalar(ids[0], -1.75), &[x.clone()], step, tol);
    grad_check(|g, ids| g.add_scalar(ids[0], 0.5), &[x.clone()], step, tol);
    let pos = x.map(|v| v.abs() + 0.5);
    grad_check(|g, ids| g.log(ids[0]), &[pos.clone()], step, tol);
    grad_check(|g, ids| g.sqrt(ids[0]), &[pos.clone()], step, tol);
    let m = randn::<f64>(&[10, 11], 18);
    grad_check(|g, ids| g.mean_all(ids[0]), &[m.clone()], step, tol);
    grad_check(|g, ids| g.sum_all(ids[0]), &[m.clone()], step, tol);
    let v = randn::<f64>(&[1, 9], 19);
    grad_check(|g, ids| g.row_add(ids[0], ids[1]).unwrap(), &[x.clone(), v.clone()], step, tol);
    grad_check(|g, ids| g.row_mul(ids[0], ids[1]).unwrap(), &[x.clone(), v.clone()], step, tol);
}

/// 32-bit backward vs a 64-bit finite-difference oracle of the same graph.
/// The oracle stays in f64 so its own truncation noise does not mask the
/// 1e-3 tolerance the 32-bit path is held to.
fn grad_check_f32(
    build32: fn(&mut Graph<f32>, &[NodeId]) -> NodeId,
    build64: fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
    inputs32: &[Tensor<f32>],
    tol: f64,
) {
    let mut weights_rng = rng(0x5eed);
    let out_shape = {
        let mut g = Graph::new();
        let ids: Vec<_> = inputs32.iter().map(|t| g.leaf(t.clone(), true)).collect();
        let out = build32(&mut g, &ids);
        g.value(out).shape().to_vec()
    };
    let w64 = Tensor::<f64>::randn(out_shape, &mut weights_rng);
    let w32: Tensor<f32> = w64.cast();

    let mut g = Graph::new();
    let ids: Vec<_> = inputs32.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build32(&mut g, &ids);
    let wid = g.constant(w32);
    let weighted = g.mul(out, wid).unwrap();
    let loss = g.sum_all(weighted);
    g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).expect("leaf gradient").to_f64_vec())
        .collect();

    let inputs64: Vec<Tensor<f64>> = inputs32.iter().map(|t| t.cast()).collect();
    let numeric = finite_diff::gradients(
        |xs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let ids: Vec<_> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
            let out = build64(&mut g, &ids);
            let wid = g.constant(w64.clone());
            let weighted = g.mul(out, wid).unwrap();
            let loss = g.sum_all(weighted);
            g.value(loss).item()
        },
        &inputs64,
        1e-5,
    );

    for (a, n) in analytic.iter().zip(&numeric) {
        let err = finite_diff::max_relative_error(a, n, 1e-3);
        assert!(err < tol, "32-bit gradient mismatch: max rel err {err:.3e}");
    }
}

fn build_mul<E: Scalar>(g: &mut Graph<E>, ids: &[NodeId]) -> NodeId {
    g.mul(ids[0], ids[1]).unwrap()
}
fn build_silu<E: Scalar>(g: &mut Graph<E>, ids: &[NodeId]) -> NodeId {
    g.silu(ids[0])
}
fn build_gelu<E: Scalar>(g: &mut Graph<E>, ids: &[NodeId]) -> NodeId {
    g.gelu(ids[0])
}
fn build_layernorm<E: Scalar>(g: &mut Graph<E>, ids: &[NodeId]) -> NodeId {
    g.layernorm(ids[0], 1e-6).unwrap()
}
fn build_attention<E: Scalar>(g: &mut Graph<E>, ids: &[NodeId]) -> NodeId {
    g.attention(ids[0], ids[1], ids[2]).unwrap()
}
fn build_matmul<E: Scalar>(g: &mut Graph<E>, ids: &[NodeId]) -> NodeId {
    g.matmul(ids[0], ids[1]).unwrap()
}

#[test]
fn elementwise_gradients_f32() {
    // 32-bit mode at the looser tolerance
    let tol = 1e-3;
    let x = randn::<f32>(&[6, 9], 20);
    let y = randn::<f32>(&[6, 9], 21);
    grad_check_f32(build_mul, build_mul, &[x.clone(), y.clone()], tol);
    grad_check_f32(build_silu, build_silu, &[x.clone()], tol);
    grad_check_f32(build_gelu, build_gelu, &[x.clone()], tol);
    grad_check_f32(build_layernorm, build_layernorm, &[x.clone()], tol);
    grad_check_f32(build_matmul, build_matmul, &[randn::<f32>(&[5, 4], 40), randn::<f32>(&[4, 3], 41)], tol);
    let q = randn::<f32>(&[2, 3, 4], 22);
    let k = randn::<f32>(&[2, 3, 4], 23);
    let v = randn::<f32>(&[2, 3, 4], 24);
    grad_check_f32(build_attention, build_attention, &[q, k, v], tol);
}

#[test]
fn movement_op_gradients() {
    let step = 1e-5;
    let tol = 1e-5;
    let x = randn::<f64>(&[4, 6], 25);
    grad_check(|g, ids| g.reshape(ids[0], vec![6, 4]).unwrap(), &[x.clone()], step, tol);
    grad_check(|g, ids| g.split_heads(ids[0], 3).unwrap(), &[x.clone()], step, tol);
    let h = randn::<f64>(&[3, 4, 2], 26);
    grad_check(|g, ids| g.merge_heads(ids[0]).unwrap(), &[h], step, tol);
    let img = randn::<f64>(&[4, 4, 3], 27);
    grad_check(|g, ids| g.patchify(ids[0], 2).unwrap(), &[img.clone()], step, tol);
    let tok = randn::<f64>(&[4, 12], 28);
    grad_check(|g, ids| g.unpatchify(ids[0], 2, 3).unwrap(), &[tok], step, tol);
    let a = randn::<f64>(&[2, 5], 29);
    let b = randn::<f64>(&[2, 3], 30);
    grad_check(|g, ids| g.concat_last(ids[0], ids[1]).unwrap(), &[a.clone(), b], step, tol);
    grad_check(|g, ids| g.slice_last(ids[0], 1, 3).unwrap(), &[a], step, tol);
}

#[test]
fn diamond_graph_sums_both_paths() {
    // loss = sum(x*x) + sum(3*x): d/dx = 2x + 3 through two paths sharing x.
    let xt = randn::<f64>(&[5], 31);
    let mut g = Graph::new();
    let x = g.leaf(xt.clone(), true);
    let sq = g.mul(x, x).unwrap();
    let left = g.sum_all(sq);
    let scaled = g.mul_scalar(x, 3.0);
    let right = g.sum_all(scaled);
    let loss = g.add(left, right).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(x).unwrap();
    for (gv, xv) in grad.data().iter().zip(xt.data()) {
        assert!((gv - (2.0 * xv + 3.0)).abs() < 1e-12);
    }
}

#[test]
fn backward_twice_accumulates_additively() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(2.0), true);
    let y = g.mul(x, x).unwrap();
    let loss = g.sum_all(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 4.0);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 8.0);
}

#[test]
fn detach_blocks_gradient_flow() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::scalar(3.0), true);
    let d = g.detach(x);
    let y = g.mul(d, d).unwrap();
    let loss = g.sum_all(y);
    g.backward(loss).unwrap();
    assert!(g.grad(x).is_none());
    // value still flows forward
    assert_eq!(g.value(y).item(), 9.0);
}

#[test]
fn patchify_unpatchify_roundtrip_is_identity() {
    let img = randn::<f64>(&[6, 6, 4], 32);
    let mut g = Graph::new();
    let x = g.constant(img.clone());
    let tok = g.patchify(x, 3).unwrap();
    let back = g.unpatchify(tok, 3, 4).unwrap();
    assert_eq!(g.value(back).data(), img.data());
    assert_eq!(g.value(back).shape(), img.shape());
}

#[test]
fn split_merge_heads_roundtrip() {
    let x = randn::<f64>(&[5, 12], 33);
    let mut g = Graph::new();
    let a = g.constant(x.clone());
    let s = g.split_heads(a, 4).unwrap();
    assert_eq!(g.value(s).shape(), &[4, 5, 3]);
    let m = g.merge_heads(s).unwrap();
    assert_eq!(g.value(m).data(), x.data());
}

#[test]
fn layernorm_zero_extent_is_rejected() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros(vec![2, 0]));
    assert!(g.layernorm(x, 1e-6).is_err());
}
