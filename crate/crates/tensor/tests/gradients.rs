//! Every differentiable op checked against central differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refcod_tensor::gradcheck::check_gradients;
use refcod_tensor::{Tensor, Var};

const STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(17)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Contracts any output with a fixed random tensor so every output element matters.
fn project(out: &Var, seed: u64) -> Var {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let w = Var::constant(Tensor::randn(out.shape(), 1.0, &mut r));
    out.mul(&w).sum()
}

fn assert_check(name: &str, f: impl Fn(&[Var]) -> Var, inputs: &[Tensor]) {
    let report = check_gradients(f, inputs, None, STEP, FLOOR);
    assert!(
        report.passes(TOL),
        "{name}: max relative error {:.3e} at {:?}",
        report.max_rel_error,
        report.worst
    );
}

#[test]
fn broadcasting_arithmetic() {
    let mut r = rng();
    let a = randn(&[2, 3, 4], &mut r);
    let b = randn(&[3, 1], &mut r);
    let c = randn(&[4], &mut r).map(|v| v.abs() + 0.5);
    assert_check(
        "arith",
        |v| project(&v[0].add(&v[1]).mul(&v[0]).sub(&v[1]).div(&v[2]), 1),
        &[a, b, c],
    );
}

#[test]
fn unary_ops() {
    let mut r = rng();
    let x = randn(&[3, 5], &mut r);
    let pos = x.map(|v| v.abs() + 0.3);
    assert_check("exp", |v| project(&v[0].exp(), 2), std::slice::from_ref(&x));
    assert_check("ln", |v| project(&v[0].ln(), 3), std::slice::from_ref(&pos));
    assert_check(
        "sqrt",
        |v| project(&v[0].sqrt(), 4),
        std::slice::from_ref(&pos),
    );
    assert_check("powf", |v| project(&v[0].powf(1.7), 5), &[pos]);
    assert_check(
        "sigmoid",
        |v| project(&v[0].sigmoid(), 6),
        std::slice::from_ref(&x),
    );
    assert_check(
        "softplus",
        |v| project(&v[0].softplus(), 7),
        std::slice::from_ref(&x),
    );
    assert_check(
        "log_sigmoid",
        |v| project(&v[0].log_sigmoid(), 8),
        std::slice::from_ref(&x),
    );
    assert_check(
        "tanh",
        |v| project(&v[0].tanh(), 9),
        std::slice::from_ref(&x),
    );
    assert_check(
        "gelu",
        |v| project(&v[0].gelu(), 10),
        std::slice::from_ref(&x),
    );
    assert_check("square", |v| project(&v[0].square().neg(), 11), &[x]);
}

#[test]
fn reductions_softmax_layer_norm() {
    let mut r = rng();
    let x = randn(&[2, 3, 5], &mut r);
    let g = randn(&[5], &mut r);
    let b = randn(&[5], &mut r);
    assert_check(
        "sum_axes",
        |v| project(&v[0].sum_axes(&[0, 2]), 12),
        std::slice::from_ref(&x),
    );
    assert_check(
        "mean_axes",
        |v| project(&v[0].mean_axes(&[1]), 13),
        std::slice::from_ref(&x),
    );
    assert_check(
        "softmax",
        |v| project(&v[0].softmax_last(), 14),
        std::slice::from_ref(&x),
    );
    assert_check(
        "layer_norm",
        |v| project(&v[0].layer_norm(&v[1], &v[2], 1e-5), 15),
        &[x, g, b],
    );
}

#[test]
fn shape_ops() {
    let mut r = rng();
    let x = randn(&[2, 3, 4], &mut r);
    let y = randn(&[2, 2, 4], &mut r);
    assert_check(
        "permute",
        |v| project(&v[0].permute(&[2, 0, 1]), 16),
        std::slice::from_ref(&x),
    );
    assert_check(
        "concat",
        |v| project(&Var::concat(&[v[0].clone(), v[1].clone()], 1), 17),
        &[x.clone(), y],
    );
    assert_check("narrow", |v| project(&v[0].narrow(2, 1, 2), 18), &[x]);
}

#[test]
fn matmul_batched_and_shared() {
    let mut r = rng();
    let a = randn(&[2, 3, 4], &mut r);
    let b = randn(&[2, 4, 5], &mut r);
    let w = randn(&[4, 2], &mut r);
    assert_check(
        "matmul",
        |v| project(&v[0].matmul(&v[1]), 19),
        &[a.clone(), b],
    );
    assert_check(
        "matmul shared",
        |v| project(&v[0].matmul(&v[1]), 20),
        &[a, w],
    );
}

#[test]
fn convolution_padding_upsampling() {
    let mut r = rng();
    let x = randn(&[2, 2, 5, 5], &mut r);
    let w = randn(&[3, 2, 3, 3], &mut r);
    let b = randn(&[3], &mut r);
    assert_check(
        "conv s1",
        |v| project(&v[0].conv2d(&v[1], Some(&v[2]), 1, 1), 21),
        &[x.clone(), w.clone(), b.clone()],
    );
    assert_check(
        "conv s2",
        |v| project(&v[0].conv2d(&v[1], Some(&v[2]), 2, 1), 22),
        &[x.clone(), w, b],
    );
    assert_check(
        "replicate",
        |v| project(&v[0].pad_replicate(2), 23),
        std::slice::from_ref(&x),
    );
    assert_check(
        "upsample",
        |v| project(&v[0].upsample_bilinear(8, 7), 24),
        std::slice::from_ref(&x),
    );
    assert_check(
        "downsample",
        |v| project(&v[0].upsample_bilinear(3, 2), 25),
        &[x],
    );
}

#[test]
fn bilinear_sampling_source_and_positions() {
    let mut r = rng();
    let src = randn(&[1, 2, 12, 3], &mut r);
    // keep positions away from integer grid lines, where the interpolant has kinks
    let pos = Tensor::from_vec(
        &[1, 2, 3, 2],
        vec![
            0.3, 1.6, 2.45, 0.2, -0.4, 2.7, 1.1, 3.35, 2.6, 0.55, 0.8, -0.3,
        ],
    );
    assert_check(
        "sample",
        |v| project(&v[0].bilinear_sample(&v[1], 3, 4), 26),
        &[src, pos],
    );
}

#[test]
fn fused_attention_with_and_without_key_scale() {
    let mut r = rng();
    let q = randn(&[2, 2, 3, 4], &mut r);
    let k = randn(&[2, 2, 5, 4], &mut r);
    let v = randn(&[2, 2, 5, 3], &mut r);
    let s = Tensor::uniform(&[2, 5], 0.5, 2.0, &mut r);
    assert_check(
        "attention",
        |x| project(&Var::attention(&x[0], &x[1], &x[2], None), 27),
        &[q.clone(), k.clone(), v.clone()],
    );
    assert_check(
        "attention scaled",
        |x| project(&Var::attention(&x[0], &x[1], &x[2], Some(&x[3])), 28),
        &[q, k, v, s],
    );
}

#[test]
fn clamp_passes_gradient_only_inside() {
    let x = Var::leaf(Tensor::from_vec(&[3], vec![-2.0, 0.5, 2.0]));
    x.clamp(-1.0, 1.0).sum().backward();
    assert_eq!(x.grad().unwrap().data(), &[0.0, 1.0, 0.0]);
}
