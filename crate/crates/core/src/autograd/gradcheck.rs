//! Finite-difference checks of every op's backward pass.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random(shape: &[usize], rng: &mut ChaCha8Rng, amp: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-amp..amp)).collect())
}

/// Reduce an op output to a scalar with fixed random weights, so every
/// output element contributes a distinct amount.
fn project(g: &Graph, out: &Var, weights: &Tensor) -> Var {
    let prod: f32 = out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
    let w = weights.clone();
    g.record(Tensor::scalar(prod), &[out], move || {
        Box::new(move |grad: &Tensor, _: &[bool]| {
            let d = w.data().iter().map(|v| v * grad.item()).collect();
            vec![Some(Tensor::new(w.shape().to_vec(), d))]
        }) as BackwardFn
    })
}

/// Compare analytic and central-difference gradients for each input.
fn check(inputs: Vec<Tensor>, tol: f32, op: impl Fn(&Graph, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let probe = {
        let g = Graph::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        op(&g, &vars).value().shape().to_vec()
    };
    let weights = random(&probe, &mut rng, 1.0);
    let eval = |ts: &[Tensor]| -> f64 {
        let g = Graph::inference();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&g, &vars);
        out.value().data().iter().zip(weights.data()).map(|(a, b)| *a as f64 * *b as f64).sum()
    };
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(Arc::new(t.clone()))).collect();
    let loss = project(&g, &op(&g, &vars), &weights);
    let grads = g.backward(&loss);
    let h = 1e-2f32;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(v).expect("missing gradient").clone();
        for i in 0..inputs[k].len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= h;
            let fd = ((eval(&plus) - eval(&minus)) / (2.0 * h as f64)) as f32;
            let a = analytic.data()[i];
            let scale = fd.abs().max(a.abs()).max(1.0);
            assert!(
                (fd - a).abs() <= tol * scale,
                "input {k} element {i}: analytic {a} vs numeric {fd}"
            );
        }
    }
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(7)
}

#[test]
fn conv3x3_gradients() {
    let mut r = rng();
    let inputs = vec![random(&[3, 4, 2, 2], &mut r, 1.0), random(&[54, 3], &mut r, 0.5), random(&[3], &mut r, 0.5)];
    check(inputs, 5e-3, |g, v| conv3d(g, &v[0], &v[1], &v[2], 3));
}

#[test]
fn linear_gradients() {
    let mut r = rng();
    let inputs = vec![random(&[2, 3, 2, 4], &mut r, 1.0), random(&[4, 5], &mut r, 0.5), random(&[5], &mut r, 0.5)];
    check(inputs, 5e-3, |g, v| linear(g, &v[0], &v[1], &v[2]));
}

#[test]
fn pool_and_activation_gradients() {
    let mut r = rng();
    check(vec![random(&[3, 3, 2, 2], &mut r, 1.0)], 5e-3, |g, v| max_pool2(g, &v[0]));
    check(vec![random(&[2, 2, 2, 3], &mut r, 1.0)], 5e-3, |g, v| leaky_relu(g, &v[0], 0.2));
    check(vec![random(&[2, 2, 2, 3], &mut r, 2.0)], 5e-3, |g, v| gelu(g, &v[0]));
}

#[test]
fn layer_norm_gradients() {
    let mut r = rng();
    let inputs = vec![random(&[2, 2, 1, 6], &mut r, 1.0), random(&[6], &mut r, 1.0), random(&[6], &mut r, 1.0)];
    check(inputs, 1e-2, |g, v| layer_norm(g, &v[0], &v[1], &v[2]));
}

#[test]
fn structural_op_gradients() {
    let mut r = rng();
    check(vec![random(&[2, 2, 1, 16], &mut r, 1.0)], 5e-3, |g, v| pixel_shuffle(g, &v[0], [3, 4, 2]));
    check(vec![random(&[2, 3, 2, 4], &mut r, 1.0)], 5e-3, |g, v| global_avg_pool(g, &v[0]));
    check(vec![random(&[12], &mut r, 0.3)], 5e-3, |g, v| affine_field(g, &v[0], [3, 2, 4]));
    check(vec![random(&[2, 3, 2, 3], &mut r, 1.0)], 5e-3, |g, v| upsample(g, &v[0], [4, 5, 3], 2.0));
    check(
        vec![random(&[2, 2, 2, 2], &mut r, 1.0), random(&[2, 2, 2, 3], &mut r, 1.0)],
        5e-3,
        |g, v| concat_channels(g, &[&v[0], &v[1]]),
    );
}

#[test]
fn warp_gradients() {
    let mut r = rng();
    // keep sample points away from integer coordinates, where the
    // interpolant has kinks
    let field = Tensor::new(
        vec![3, 3, 3, 3],
        (0..81).map(|_| r.random_range(0.1f32..0.4) * if r.random_bool(0.5) { 1.0 } else { -1.0 }).collect(),
    );
    check(vec![random(&[3, 3, 3, 2], &mut r, 1.0), field], 1e-2, |g, v| warp(g, &v[0], &v[1]));
}

#[test]
fn window_attention_gradients() {
    let mut r = rng();
    for shift in [[0, 0, 0], [1, 1, 1]] {
        let inputs = vec![random(&[3, 4, 3, 12], &mut r, 1.0), random(&[27, 2], &mut r, 0.5)];
        check(inputs, 1e-2, move |g, v| window_attention(g, &v[0], &v[1], 2, [2, 2, 2], shift));
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng();
    let qkv = random(&[5, 6, 4, 12], &mut r, 2.0);
    let bias = random(&[bias_table_len([3, 3, 3]), 2], &mut r, 1.0);
    for (voxels, probs) in attention_probabilities(&qkv, &bias, 2, [3, 3, 3], [1, 1, 1]) {
        let n = voxels.len();
        for row in probs.chunks_exact(n) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn single_voxel_window_copies_values() {
    let mut r = rng();
    let qkv = random(&[2, 3, 2, 6], &mut r, 1.0);
    let bias = Tensor::zeros(vec![1, 1]);
    let g = Graph::inference();
    let out = window_attention(&g, &g.constant(qkv.clone()), &g.constant(bias), 1, [1, 1, 1], [0, 0, 0]);
    for (o, row) in out.value().data().chunks_exact(2).zip(qkv.data().chunks_exact(6)) {
        assert_eq!(o, &row[4..6]);
    }
}

#[test]
fn shifted_window_masks_wrapped_tokens() {
    // 4 voxels along x, window 2, shift 1: the roll puts voxels 0 and 3 in
    // the same window, and they must not attend to each other
    let mut r = rng();
    let qkv = random(&[4, 1, 1, 3], &mut r, 1.0);
    let bias = Tensor::zeros(vec![bias_table_len([2, 1, 1]), 1]);
    let windows = attention_probabilities(&qkv, &bias, 1, [2, 1, 1], [1, 0, 0]);
    let wrapped = windows.iter().find(|(v, _)| v.contains(&0) && v.contains(&3)).unwrap();
    assert_eq!(wrapped.1, vec![1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn inference_graph_records_nothing() {
    let g = Graph::inference();
    let x = g.leaf(Arc::new(Tensor::zeros(vec![2, 2, 2, 1])));
    let y = leaky_relu(&g, &x, 0.2);
    assert!(!y.requires_grad());
    assert!(g.is_empty());
}
