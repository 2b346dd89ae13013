//! Shared finite-difference gradient oracle for integration tests.
//!
//! The loss under test is a fixed random projection of the op output (so
//! every output element influences the scalar); analytic gradients are
//! compared vector-wise against central differences:
//! ‖analytic − fd‖₂ / max(‖analytic‖₂, ‖fd‖₂) with step 1e-3, which is the
//! right tolerance band for f32 arithmetic.
//!
//! Kinked or tie-prone ops get inputs bounded away from their non-smooth
//! points: relu inputs have |x| ≥ 0.2, maxpool inputs are pairwise distinct
//! with gaps wider than twice the step.

// Each integration test target compiles its own copy of this module, so
// helpers used by only one target would otherwise warn in the other.
#![allow(dead_code)]

use csgd::tape::GradTape;
use csgd::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f32 = 1e-3;
pub const REL_TOL: f32 = 1e-2;
pub const SEEDS: u64 = 20;

/// Builds the scalar loss from the checked tensors.
pub type LossFn = dyn Fn(&mut GradTape, &[Tensor]) -> Tensor;

fn norm(v: &[f32]) -> f32 {
    v.iter().map(|x| (x * x) as f64).sum::<f64>().sqrt() as f32
}

/// Relative gradient error of every checked tensor, analytic vs central
/// differences, in parameter order.
pub fn rel_errors(params: &[Tensor], loss_fn: &LossFn) -> Vec<f32> {
    let mut tape = GradTape::new();
    let loss = loss_fn(&mut tape, params);
    let grads = tape.backward(&loss).expect("backward");

    let mut errors = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.grad(p).expect("gradient");
        let mut fd = vec![0.0f32; p.len()];
        for i in 0..p.len() {
            let mut plus = p.to_vec();
            plus[i] += FD_STEP;
            let mut minus = p.to_vec();
            minus[i] -= FD_STEP;
            let eval = |data: Vec<f32>| -> f32 {
                let mut bumped: Vec<Tensor> = params.to_vec();
                bumped[pi] = Tensor::new(p.shape(), data).unwrap();
                let mut t = GradTape::new();
                loss_fn(&mut t, &bumped).item().unwrap()
            };
            fd[i] = (eval(plus) - eval(minus)) / (2.0 * FD_STEP);
        }
        let diff: Vec<f32> = analytic
            .data()
            .iter()
            .zip(&fd)
            .map(|(a, b)| a - b)
            .collect();
        let denom = norm(analytic.data()).max(norm(&fd)).max(1e-6);
        errors.push(norm(&diff) / denom);
    }
    errors
}

/// Largest relative gradient error across the checked tensors.
pub fn max_rel_error(params: &[Tensor], loss_fn: &LossFn) -> f32 {
    rel_errors(params, loss_fn).into_iter().fold(0.0, f32::max)
}

/// Check analytic gradients of `params` against central differences.
pub fn check(name: &str, params: &[Tensor], loss_fn: &LossFn) {
    check_tol(name, params, loss_fn, REL_TOL);
}

pub fn check_tol(name: &str, params: &[Tensor], loss_fn: &LossFn, tol: f32) {
    for (pi, rel) in rel_errors(params, loss_fn).into_iter().enumerate() {
        assert!(
            rel <= tol,
            "{name}: param {pi} relative gradient error {rel:.3e} exceeds {tol:e}"
        );
    }
}

pub fn uniform(shape: &[usize], lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Uniform magnitudes in [0.2, 1.0) with random signs: no value near the
/// relu kink at zero.
pub fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let mag = Tensor::uniform(shape, 0.2, 1.0, rng);
    let sign = Tensor::uniform(shape, -1.0, 1.0, rng);
    let data = mag
        .data()
        .iter()
        .zip(sign.data())
        .map(|(m, s)| if *s >= 0.0 { *m } else { -*m })
        .collect();
    Tensor::new(shape, data).unwrap()
}

/// A shuffled arithmetic progression: all values pairwise distinct with gaps
/// of 0.01 ≫ 2·FD_STEP, so maxpool argmaxes cannot flip under the FD bump.
pub fn distinct(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f32> = (0..n).map(|i| (i as f32 - n as f32 / 2.0) * 0.01).collect();
    vals.shuffle(rng);
    Tensor::new(shape, vals).unwrap()
}

/// loss = Σ (out ⊙ projection) for a fixed random projection tensor.
pub fn project(tape: &mut GradTape, out: &Tensor, proj: &Tensor) -> Tensor {
    let weighted = tape.mul(out, proj).expect("projection shapes");
    tape.sum_all(&weighted)
}

/// One autograd op under gradient check: `run(seed)` draws that op's
/// fixture for the seed and returns the worst relative gradient error.
pub struct OpCase {
    pub name: &'static str,
    pub run: fn(u64) -> f32,
}

/// Every differentiable op, each with its historical seed base so results
/// stay identical whether run one op at a time or as a sweep.
pub const OP_CASES: &[OpCase] = &[
    OpCase { name: "conv2d", run: conv2d_case },
    OpCase { name: "conv2d stride 2", run: conv2d_strided_case },
    OpCase { name: "batchnorm", run: batchnorm_case },
    OpCase { name: "relu", run: relu_case },
    OpCase { name: "avgpool2d", run: avgpool_case },
    OpCase { name: "maxpool2d", run: maxpool_case },
    OpCase { name: "global_avgpool", run: global_avgpool_case },
    OpCase { name: "linear", run: linear_case },
    OpCase { name: "bias_add", run: bias_add_case },
    OpCase { name: "add", run: add_case },
    OpCase { name: "concat", run: concat_case },
    OpCase { name: "softmax_xent", run: softmax_xent_case },
];

/// Looks up an op case by name; panics on a typo so tests fail loudly.
pub fn op_case(name: &str) -> &'static OpCase {
    OP_CASES
        .iter()
        .find(|c| c.name == name)
        .unwrap_or_else(|| panic!("no gradient-check case named {name:?}"))
}

/// Runs one op over [`SEEDS`] seeds, asserting every draw meets [`REL_TOL`].
pub fn assert_op(name: &str) {
    let case = op_case(name);
    for seed in 0..SEEDS {
        let rel = (case.run)(seed);
        assert!(
            rel <= REL_TOL,
            "{name} seed {seed}: relative gradient error {rel:.3e} exceeds {REL_TOL:e}"
        );
    }
}

fn conv2d_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = uniform(&[2, 5, 5, 2], -1.0, 1.0, &mut rng);
    let k = uniform(&[3, 3, 2, 3], -0.5, 0.5, &mut rng);
    let proj = uniform(&[2, 5, 5, 3], -1.0, 1.0, &mut rng);
    max_rel_error(&[x, k], &move |tape, p| {
        let y = tape.conv2d(&p[0], &p[1], 1, 1).unwrap();
        project(tape, &y, &proj)
    })
}

fn conv2d_strided_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let x = uniform(&[1, 7, 7, 3], -1.0, 1.0, &mut rng);
    let k = uniform(&[3, 3, 3, 2], -0.5, 0.5, &mut rng);
    let proj = uniform(&[1, 4, 4, 2], -1.0, 1.0, &mut rng);
    max_rel_error(&[x, k], &move |tape, p| {
        let y = tape.conv2d(&p[0], &p[1], 2, 1).unwrap();
        project(tape, &y, &proj)
    })
}

fn batchnorm_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
    let x = uniform(&[3, 4, 4, 2], -1.0, 1.0, &mut rng);
    let gamma = uniform(&[2], 0.5, 1.5, &mut rng);
    let beta = uniform(&[2], -0.5, 0.5, &mut rng);
    let proj = uniform(&[3, 4, 4, 2], -1.0, 1.0, &mut rng);
    max_rel_error(&[x, gamma, beta], &move |tape, p| {
        let (y, _) = tape.batchnorm(&p[0], &p[1], &p[2]).unwrap();
        project(tape, &y, &proj)
    })
}

fn relu_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
    let x = away_from_zero(&[4, 6], &mut rng);
    let proj = uniform(&[4, 6], -1.0, 1.0, &mut rng);
    max_rel_error(&[x], &move |tape, p| {
        let y = tape.relu(&p[0]);
        project(tape, &y, &proj)
    })
}

fn avgpool_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
    let x = uniform(&[2, 6, 6, 3], -1.0, 1.0, &mut rng);
    let proj = uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    max_rel_error(&[x], &move |tape, p| {
        let y = tape.avgpool2d(&p[0], 2, 2).unwrap();
        project(tape, &y, &proj)
    })
}

fn maxpool_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
    let x = distinct(&[2, 6, 6, 2], &mut rng);
    let proj = uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut rng);
    max_rel_error(&[x], &move |tape, p| {
        let y = tape.maxpool2d(&p[0], 2, 2).unwrap();
        project(tape, &y, &proj)
    })
}

fn global_avgpool_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
    let x = uniform(&[2, 5, 5, 4], -1.0, 1.0, &mut rng);
    let proj = uniform(&[2, 1, 1, 4], -1.0, 1.0, &mut rng);
    max_rel_error(&[x], &move |tape, p| {
        let y = tape.global_avgpool(&p[0]).unwrap();
        project(tape, &y, &proj)
    })
}

fn linear_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
    let x = uniform(&[3, 6], -1.0, 1.0, &mut rng);
    let w = uniform(&[6, 4], -0.5, 0.5, &mut rng);
    let b = uniform(&[4], -0.5, 0.5, &mut rng);
    let proj = uniform(&[3, 4], -1.0, 1.0, &mut rng);
    max_rel_error(&[x, w, b], &move |tape, p| {
        let y = tape.linear(&p[0], &p[1], &p[2]).unwrap();
        project(tape, &y, &proj)
    })
}

fn bias_add_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
    let x = uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut rng);
    let b = uniform(&[4], -0.5, 0.5, &mut rng);
    let proj = uniform(&[2, 3, 3, 4], -1.0, 1.0, &mut rng);
    max_rel_error(&[x, b], &move |tape, p| {
        let y = tape.bias_add(&p[0], &p[1]).unwrap();
        project(tape, &y, &proj)
    })
}

fn add_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
    let a = uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut rng);
    let b = uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut rng);
    let proj = uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut rng);
    max_rel_error(&[a, b], &move |tape, p| {
        let y = tape.add(&p[0], &p[1]).unwrap();
        project(tape, &y, &proj)
    })
}

fn concat_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
    let a = uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut rng);
    let b = uniform(&[2, 3, 3, 2], -1.0, 1.0, &mut rng);
    let c = uniform(&[2, 3, 3, 3], -1.0, 1.0, &mut rng);
    let proj = uniform(&[2, 3, 3, 7], -1.0, 1.0, &mut rng);
    max_rel_error(&[a, b, c], &move |tape, p| {
        let y = tape
            .concat_channels(&[p[0].clone(), p[1].clone(), p[2].clone()])
            .unwrap();
        project(tape, &y, &proj)
    })
}

fn softmax_xent_case(seed: u64) -> f32 {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
    let logits = uniform(&[4, 5], -2.0, 2.0, &mut rng);
    let labels = vec![0usize, 2, 4, 1];
    max_rel_error(&[logits], &move |tape, p| {
        tape.softmax_xent(&p[0], &labels).unwrap()
    })
}
