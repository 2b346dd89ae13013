//! The centripetal update and its baselines.
//!
//! For a clustered layer, filters of one cluster receive the *averaged*
//! task gradient of the cluster plus a pull toward the cluster mean, so
//! their mutual deviations contract by the exact factor `1 − τ(η + ε)` per
//! step (τ learning rate, η weight decay, ε centripetal strength) while the
//! cluster mean keeps training on the task. In matrix form, with a layer's
//! parameters viewed as columns of `W` (kernels reshaped to
//! `[u·v·c_in, c]`; γ and β as `[1, c]` rows):
//!
//! ```text
//! W ← W − τ·(G·Γ + W·Λ),   Γ[m][n] = 1/|H(m)| if m, n share a cluster else 0,
//!                          Λ = (η + ε)·I − ε·Γ
//! ```
//!
//! `Γ` is symmetric, row-stochastic and idempotent; for singleton clusters
//! the update reduces to plain SGD with weight decay. The module also hosts
//! the competing baselines: a group-Lasso subgradient that shrinks whole
//! filters toward zero, and the magnitude criterion that keeps the
//! largest-norm filters.

use std::collections::BTreeMap;

use crate::clustering::{validate_clusters, ClusterAssignment, Clusters};
use crate::error::{Error, Result};
use crate::graph::LayerKind;
use crate::model::{
    derive_constraint_groups, ConstraintKind, Follower, LayerParams, Model,
};
use crate::ops::matmul;
use crate::tape::GradStore;
use crate::tensor::Tensor;

/// Cluster-averaging matrix `Γ` (`c × c`, row-major).
pub fn build_gamma(clusters: &Clusters, c: usize) -> Result<Vec<f32>> {
    validate_clusters(clusters, c)?;
    let mut gamma = vec![0.0f32; c * c];
    for cluster in clusters {
        let w = 1.0 / cluster.len() as f32;
        for &m in cluster {
            for &n in cluster {
                gamma[m * c + n] = w;
            }
        }
    }
    Ok(gamma)
}

/// Decay-and-pull matrix `Λ = (η + ε)·I − ε·Γ`.
pub fn build_lambda(clusters: &Clusters, c: usize, eta: f32, epsilon: f32) -> Result<Vec<f32>> {
    let gamma = build_gamma(clusters, c)?;
    let mut lambda: Vec<f32> = gamma.iter().map(|&g| -epsilon * g).collect();
    for m in 0..c {
        lambda[m * c + m] += eta + epsilon;
    }
    Ok(lambda)
}

/// One centripetal step on a `[rows, c]` parameter view:
/// `W ← W − τ·(G·Γ + W·Λ)`. The arithmetic order is fixed — `G·Γ` first,
/// then `W·Λ`, sum, scale — so the naive form can match it bit-for-bit
/// within f32 rounding.
pub fn csgd_step_matrix(
    w: &mut [f32],
    g: &[f32],
    gamma: &[f32],
    lambda: &[f32],
    rows: usize,
    c: usize,
    tau: f32,
) {
    debug_assert_eq!(w.len(), rows * c);
    debug_assert_eq!(g.len(), rows * c);
    debug_assert_eq!(gamma.len(), c * c);
    let mut g_avg = vec![0.0f32; rows * c];
    matmul(rows, c, c, g, gamma, &mut g_avg);
    let mut pull = vec![0.0f32; rows * c];
    matmul(rows, c, c, w, lambda, &mut pull);
    for ((wi, ga), pu) in w.iter_mut().zip(&g_avg).zip(&pull) {
        *wi -= tau * (ga + pu);
    }
}

/// The same step written as explicit per-filter loops (the independent
/// reference for the matrix form): each filter moves by the cluster-mean
/// gradient, its own weight decay, and the pull toward the cluster mean.
// The flat argument list deliberately mirrors the update's symbols.
#[allow(clippy::too_many_arguments)]
pub fn csgd_step_naive(
    w: &mut [f32],
    g: &[f32],
    clusters: &Clusters,
    rows: usize,
    c: usize,
    tau: f32,
    eta: f32,
    epsilon: f32,
) {
    debug_assert_eq!(w.len(), rows * c);
    let mut delta = vec![0.0f32; rows * c];
    for cluster in clusters {
        let size = cluster.len() as f64;
        for row in 0..rows {
            let g_mean = cluster
                .iter()
                .map(|&j| g[row * c + j] as f64)
                .sum::<f64>()
                / size;
            let w_mean = cluster
                .iter()
                .map(|&j| w[row * c + j] as f64)
                .sum::<f64>()
                / size;
            for &j in cluster {
                let wj = w[row * c + j] as f64;
                delta[row * c + j] =
                    (g_mean + eta as f64 * wj + epsilon as f64 * (wj - w_mean)) as f32;
            }
        }
    }
    for (wi, d) in w.iter_mut().zip(&delta) {
        *wi -= tau * d;
    }
}

/// Plain SGD with coupled weight decay: `w ← w − τ·(g + η·w)`.
pub fn sgd_update(w: &mut [f32], g: &[f32], tau: f32, eta: f32) {
    debug_assert_eq!(w.len(), g.len());
    for (wi, gi) in w.iter_mut().zip(g) {
        *wi -= tau * (gi + eta * *wi);
    }
}

/// Total squared deviation of clustered kernels from their cluster means:
/// `Σ_layers Σ_j ‖K_j − mean(K over H(j))‖²`, accumulated in f64. This is
/// the quantity the centripetal pull drives to zero; trimming is lossless
/// exactly when it vanishes.
pub fn chi(model: &Model, assignment: &ClusterAssignment) -> Result<f64> {
    let mut total = 0.0f64;
    for (id, clusters) in &assignment.by_layer {
        let (kernel, ..) = model.conv(id)?;
        let c = kernel.shape()[3];
        let rows = kernel.len() / c;
        let data = kernel.data();
        for cluster in clusters {
            let size = cluster.len() as f64;
            for row in 0..rows {
                let mean = cluster
                    .iter()
                    .map(|&j| data[row * c + j] as f64)
                    .sum::<f64>()
                    / size;
                for &j in cluster {
                    let d = data[row * c + j] as f64 - mean;
                    total += d * d;
                }
            }
        }
    }
    Ok(total)
}

/// The filters trimming will discard: every cluster member except the
/// smallest index.
pub fn pruned_sets(assignment: &ClusterAssignment) -> BTreeMap<String, Vec<usize>> {
    let mut out = BTreeMap::new();
    for (id, clusters) in &assignment.by_layer {
        let mut pruned: Vec<usize> = clusters
            .iter()
            .flat_map(|cluster| cluster.iter().copied().skip(1))
            .collect();
        pruned.sort_unstable();
        out.insert(id.clone(), pruned);
    }
    out
}

/// Total squared magnitude of the filters slated for removal:
/// `Σ_layers Σ_{j ∈ pruned} ‖K_j‖²`, accumulated in f64. Zero-penalty
/// baselines drive this toward zero; the centripetal update does not.
pub fn phi(model: &Model, pruned: &BTreeMap<String, Vec<usize>>) -> Result<f64> {
    let mut total = 0.0f64;
    for (id, set) in pruned {
        let (kernel, ..) = model.conv(id)?;
        let c = kernel.shape()[3];
        let rows = kernel.len() / c;
        let data = kernel.data();
        for row in 0..rows {
            for &j in set {
                let x = data[row * c + j] as f64;
                total += x * x;
            }
        }
    }
    Ok(total)
}

/// Adds the group-Lasso subgradient `strength · K_j / ‖K_j‖` to the kernel
/// gradient for every filter in `pruned` (zero filters contribute zero).
/// Under zero task gradient and zero weight decay each penalized filter's
/// norm shrinks by exactly `τ·strength` per step until it hits zero.
pub fn apply_group_lasso(kernel: &Tensor, grad: &mut [f32], pruned: &[usize], strength: f32) {
    let c = kernel.shape()[3];
    let rows = kernel.len() / c;
    let data = kernel.data();
    for &j in pruned {
        let norm = (0..rows)
            .map(|row| {
                let x = data[row * c + j] as f64;
                x * x
            })
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            continue;
        }
        for row in 0..rows {
            grad[row * c + j] += strength * (data[row * c + j] as f64 / norm) as f32;
        }
    }
}

/// Magnitude criterion: the `keep` filters with the largest kernel norms
/// survive (ties keep the lower index). Returns sorted indices.
pub fn magnitude_remaining_set(kernel: &Tensor, keep: usize) -> Result<Vec<usize>> {
    let c = kernel.shape()[3];
    if keep == 0 || keep > c {
        return Err(Error::InvalidArgument(format!(
            "cannot keep {keep} of {c} filters"
        )));
    }
    let rows = kernel.len() / c;
    let data = kernel.data();
    let norms: Vec<f64> = (0..c)
        .map(|j| {
            (0..rows)
                .map(|row| {
                    let x = data[row * c + j] as f64;
                    x * x
                })
                .sum::<f64>()
        })
        .collect();
    let mut order: Vec<usize> = (0..c).collect();
    // Stable sort: equal norms keep ascending index order.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));
    let mut kept: Vec<usize> = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Per-layer matrices for one clustered convolution.
struct LayerMats {
    gamma: Vec<f32>,
    lambda: Vec<f32>,
    c: usize,
}

/// Channel segment of a standalone `bn` layer: `[offset, offset + width)`
/// governed by `pacesetter` (which may or may not be clustered).
struct BnSegment {
    offset: usize,
    width: usize,
    pacesetter: String,
}

/// Applies centripetal updates to clustered convolutions (kernel, and γ/β
/// where trainable), mirrors pacesetter clusters onto the matching channel
/// slices of standalone `bn` layers, and falls back to plain SGD with
/// weight decay everywhere else. Running statistics are never touched.
pub struct CsgdOptimizer {
    pub eta: f32,
    pub epsilon: f32,
    assignment: ClusterAssignment,
    mats: BTreeMap<String, LayerMats>,
    bn_segments: BTreeMap<String, Vec<BnSegment>>,
}

impl CsgdOptimizer {
    pub fn new(
        model: &Model,
        assignment: &ClusterAssignment,
        eta: f32,
        epsilon: f32,
    ) -> Result<Self> {
        let mut mats = BTreeMap::new();
        for (id, clusters) in &assignment.by_layer {
            let (kernel, ..) = model.conv(id)?;
            let c = kernel.shape()[3];
            mats.insert(
                id.clone(),
                LayerMats {
                    gamma: build_gamma(clusters, c)?,
                    lambda: build_lambda(clusters, c, eta, epsilon)?,
                    c,
                },
            );
        }

        let mut bn_segments: BTreeMap<String, Vec<BnSegment>> = BTreeMap::new();
        for group in derive_constraint_groups(&model.spec)? {
            if group.kind != ConstraintKind::Dense {
                continue;
            }
            let (kernel, ..) = model.conv(&group.pacesetter)?;
            let width = kernel.shape()[3];
            for follower in group.followers {
                let Follower::BnSlice { layer, offset } = follower else {
                    continue;
                };
                bn_segments.entry(layer).or_default().push(BnSegment {
                    offset,
                    width,
                    pacesetter: group.pacesetter.clone(),
                });
            }
        }
        for segments in bn_segments.values_mut() {
            segments.sort_by_key(|s| s.offset);
        }

        Ok(Self {
            eta,
            epsilon,
            assignment: assignment.clone(),
            mats,
            bn_segments,
        })
    }

    pub fn assignment(&self) -> &ClusterAssignment {
        &self.assignment
    }

    fn centripetal(&self, id: &str, w: &mut [f32], g: &[f32], rows: usize, tau: f32) {
        let m = &self.mats[id];
        csgd_step_matrix(w, g, &m.gamma, &m.lambda, rows, m.c, tau);
    }

    /// One update with learning rate `tau` from the gradients of a single
    /// backward pass.
    pub fn step(&self, model: &mut Model, grads: &GradStore, tau: f32) -> Result<()> {
        let spec = model.spec.clone();
        for layer in &spec.layers {
            match &layer.kind {
                LayerKind::Conv { .. } => {
                    let clustered = self.mats.contains_key(&layer.id);
                    let Some(LayerParams::Conv {
                        kernel,
                        gamma,
                        beta,
                        has_bn,
                        ..
                    }) = model.params.get_mut(&layer.id)
                    else {
                        continue;
                    };
                    let c = kernel.shape()[3];
                    let rows = kernel.len() / c;

                    let gk = grads.grad(kernel)?;
                    let mut w = kernel.to_vec();
                    if clustered {
                        self.centripetal(&layer.id, &mut w, gk.data(), rows, tau);
                    } else {
                        sgd_update(&mut w, gk.data(), tau, self.eta);
                    }
                    *kernel = Tensor::new(kernel.shape(), w)?;

                    if *has_bn {
                        let gg = grads.grad(gamma)?;
                        let mut v = gamma.to_vec();
                        if clustered {
                            self.centripetal(&layer.id, &mut v, gg.data(), 1, tau);
                        } else {
                            sgd_update(&mut v, gg.data(), tau, self.eta);
                        }
                        *gamma = Tensor::new(gamma.shape(), v)?;
                    }

                    let gb = grads.grad(beta)?;
                    let mut v = beta.to_vec();
                    if clustered {
                        self.centripetal(&layer.id, &mut v, gb.data(), 1, tau);
                    } else {
                        sgd_update(&mut v, gb.data(), tau, self.eta);
                    }
                    *beta = Tensor::new(beta.shape(), v)?;
                }
                LayerKind::Bn { .. } => {
                    let segments = self.bn_segments.get(&layer.id);
                    let Some(LayerParams::Bn { gamma, beta, .. }) =
                        model.params.get_mut(&layer.id)
                    else {
                        continue;
                    };
                    let ggamma = grads.grad(gamma)?;
                    let gbeta = grads.grad(beta)?;
                    for (vec_ref, grad) in [(&mut *gamma, ggamma), (&mut *beta, gbeta)] {
                        let mut v = vec_ref.to_vec();
                        match segments {
                            Some(segs) => {
                                for seg in segs {
                                    let range = seg.offset..seg.offset + seg.width;
                                    let mut slice = v[range.clone()].to_vec();
                                    let gslice = &grad.data()[range.clone()];
                                    if self.mats.contains_key(&seg.pacesetter) {
                                        self.centripetal(
                                            &seg.pacesetter,
                                            &mut slice,
                                            gslice,
                                            1,
                                            tau,
                                        );
                                    } else {
                                        sgd_update(&mut slice, gslice, tau, self.eta);
                                    }
                                    v[range].copy_from_slice(&slice);
                                }
                            }
                            None => sgd_update(&mut v, grad.data(), tau, self.eta),
                        }
                        *vec_ref = Tensor::new(vec_ref.shape(), v)?;
                    }
                }
                LayerKind::Linear { .. } => {
                    let Some(LayerParams::Linear { weight, bias }) =
                        model.params.get_mut(&layer.id)
                    else {
                        continue;
                    };
                    let gw = grads.grad(weight)?;
                    let mut v = weight.to_vec();
                    sgd_update(&mut v, gw.data(), tau, self.eta);
                    *weight = Tensor::new(weight.shape(), v)?;

                    let gb = grads.grad(bias)?;
                    let mut v = bias.to_vec();
                    sgd_update(&mut v, gb.data(), tau, self.eta);
                    *bias = Tensor::new(bias.shape(), v)?;
                }
                LayerKind::Pool { .. } | LayerKind::Add { .. } | LayerKind::Concat => {}
            }
        }
        Ok(())
    }
}

/// Plain SGD over every trainable tensor (the baseline trainer); `lasso`
/// optionally adds the group-Lasso subgradient on selected filters before
/// the kernel update.
pub struct SgdOptimizer {
    pub eta: f32,
    /// layer id → (penalized filter set, strength)
    pub lasso: BTreeMap<String, (Vec<usize>, f32)>,
}

impl SgdOptimizer {
    pub fn new(eta: f32) -> Self {
        Self {
            eta,
            lasso: BTreeMap::new(),
        }
    }

    pub fn with_lasso(eta: f32, lasso: BTreeMap<String, (Vec<usize>, f32)>) -> Self {
        Self { eta, lasso }
    }

    pub fn step(&self, model: &mut Model, grads: &GradStore, tau: f32) -> Result<()> {
        let spec = model.spec.clone();
        for layer in &spec.layers {
            match model.params.get_mut(&layer.id) {
                Some(LayerParams::Conv {
                    kernel,
                    gamma,
                    beta,
                    has_bn,
                    ..
                }) => {
                    let gk = grads.grad(kernel)?;
                    let mut g = gk.to_vec();
                    if let Some((pruned, strength)) = self.lasso.get(&layer.id) {
                        apply_group_lasso(kernel, &mut g, pruned, *strength);
                    }
                    let mut w = kernel.to_vec();
                    sgd_update(&mut w, &g, tau, self.eta);
                    *kernel = Tensor::new(kernel.shape(), w)?;

                    if *has_bn {
                        let gg = grads.grad(gamma)?;
                        let mut v = gamma.to_vec();
                        sgd_update(&mut v, gg.data(), tau, self.eta);
                        *gamma = Tensor::new(gamma.shape(), v)?;
                    }
                    let gb = grads.grad(beta)?;
                    let mut v = beta.to_vec();
                    sgd_update(&mut v, gb.data(), tau, self.eta);
                    *beta = Tensor::new(beta.shape(), v)?;
                }
                Some(LayerParams::Bn { gamma, beta, .. }) => {
                    for vec_ref in [gamma, beta] {
                        let g = grads.grad(vec_ref)?;
                        let mut v = vec_ref.to_vec();
                        sgd_update(&mut v, g.data(), tau, self.eta);
                        *vec_ref = Tensor::new(vec_ref.shape(), v)?;
                    }
                }
                Some(LayerParams::Linear { weight, bias }) => {
                    for vec_ref in [weight, bias] {
                        let g = grads.grad(vec_ref)?;
                        let mut v = vec_ref.to_vec();
                        sgd_update(&mut v, g.data(), tau, self.eta);
                        *vec_ref = Tensor::new(vec_ref.shape(), v)?;
                    }
                }
                None => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{even_clusters, imbalanced_clusters, propagate_clusters};
    use crate::graph::{toy_densenet, toy_resnet, toy_vgg};
    use crate::model::build_model;
    use crate::tape::GradTape;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gamma_worked_example() {
        let clusters = vec![vec![0, 1], vec![2], vec![3]];
        let gamma = build_gamma(&clusters, 4).unwrap();
        #[rustfmt::skip]
        let expected = vec![
            0.5, 0.5, 0.0, 0.0,
            0.5, 0.5, 0.0, 0.0,
            0.0, 0.0, 1.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        ];
        assert_eq!(gamma, expected);
    }

    #[test]
    fn lambda_worked_example() {
        let lambda = build_lambda(&vec![vec![0, 1]], 2, 1e-4, 3e-3).unwrap();
        assert!((lambda[0] - 1.6e-3).abs() < 1e-9);
        assert!((lambda[1] + 1.5e-3).abs() < 1e-9);
        assert!((lambda[2] + 1.5e-3).abs() < 1e-9);
        assert!((lambda[3] - 1.6e-3).abs() < 1e-9);
    }

    #[test]
    fn singleton_clusters_reduce_to_plain_sgd() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let clusters: Clusters = (0..6).map(|j| vec![j]).collect();
        let gamma = build_gamma(&clusters, 6).unwrap();
        let lambda = build_lambda(&clusters, 6, 1e-4, 3e-3).unwrap();
        let w0: Vec<f32> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f32> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();

        let mut w_mat = w0.clone();
        csgd_step_matrix(&mut w_mat, &g, &gamma, &lambda, 5, 6, 0.1);
        let mut w_sgd = w0;
        sgd_update(&mut w_sgd, &g, 0.1, 1e-4);
        for (a, b) in w_mat.iter().zip(&w_sgd) {
            assert!((a - b).abs() <= 1e-7, "{a} vs {b}");
        }
    }

    #[test]
    fn matrix_and_naive_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for c in [4usize, 9, 16] {
            for clusters in [
                even_clusters(c, c / 2).unwrap(),
                imbalanced_clusters(c, c / 2 + 1).unwrap(),
            ] {
                let rows = 18;
                let gamma = build_gamma(&clusters, c).unwrap();
                let lambda = build_lambda(&clusters, c, 1e-4, 3e-3).unwrap();
                let mut w_mat: Vec<f32> =
                    (0..rows * c).map(|_| rng.random_range(-1.0..1.0)).collect();
                let mut w_naive = w_mat.clone();
                for _ in 0..20 {
                    let g: Vec<f32> =
                        (0..rows * c).map(|_| rng.random_range(-1.0..1.0)).collect();
                    csgd_step_matrix(&mut w_mat, &g, &gamma, &lambda, rows, c, 3e-2);
                    csgd_step_naive(&mut w_naive, &g, &clusters, rows, c, 3e-2, 1e-4, 3e-3);
                }
                let max = w_mat
                    .iter()
                    .zip(&w_naive)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f32, f32::max);
                assert!(max <= 1e-6, "c={c}: forms disagree by {max}");
            }
        }
    }

    fn scalar_kernel_model(values: &[f32]) -> (Model, ClusterAssignment) {
        let spec = toy_vgg([4, 4, 1], 2, &[vec![values.len()]]);
        let mut model = build_model(&spec, 0).unwrap();
        if let Some(LayerParams::Conv { kernel, .. }) = model.params.get_mut("s0c0") {
            // 1×1-equivalent: zero all but one kernel position per filter.
            let c = values.len();
            let mut data = vec![0.0f32; kernel.len()];
            data[..c].copy_from_slice(values);
            *kernel = Tensor::new(kernel.shape(), data).unwrap();
        }
        let mut base = BTreeMap::new();
        base.insert("s0c0".to_string(), vec![(0..values.len()).collect()]);
        let assignment = propagate_clusters(&spec, base).unwrap();
        (model, assignment)
    }

    #[test]
    fn chi_worked_example() {
        // Two filters with single nonzero values 1 and 3 in one cluster:
        // mean 2, deviations ±1, χ = 2.
        let (model, assignment) = scalar_kernel_model(&[1.0, 3.0]);
        assert!((chi(&model, &assignment).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn phi_worked_example() {
        // Pruned filter with single nonzero value 2 → φ = 4.
        let (model, assignment) = scalar_kernel_model(&[5.0, 2.0]);
        let sets = pruned_sets(&assignment);
        assert_eq!(sets["s0c0"], vec![1]);
        assert!((phi(&model, &sets).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn deviations_contract_by_the_exact_factor() {
        // Live gradients from a real forward/backward; the deviation update
        // cancels the task gradient exactly, leaving χ(t+1)/χ(t) =
        // (1 − τ(η+ε))² up to f32 rounding.
        let spec = toy_vgg([6, 6, 1], 2, &[vec![6]]);
        let mut model = build_model(&spec, 3).unwrap();
        let mut base = BTreeMap::new();
        base.insert("s0c0".to_string(), even_clusters(6, 3).unwrap());
        let assignment = propagate_clusters(&spec, base).unwrap();
        let (tau, eta, epsilon) = (3e-2f32, 1e-4f32, 3e-3f32);
        let opt = CsgdOptimizer::new(&model, &assignment, eta, epsilon).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform([4, 6, 6, 1], -1.0, 1.0, &mut rng);
        let labels = vec![0usize, 1, 0, 1];
        let expected = (1.0 - (tau as f64) * ((eta + epsilon) as f64)).powi(2);

        let mut prev = chi(&model, &assignment).unwrap();
        for _ in 0..50 {
            let mut tape = GradTape::new();
            let logits = model.forward_train(&mut tape, &x, 0.1).unwrap();
            let loss = tape.softmax_xent(&logits, &labels).unwrap();
            let grads = tape.backward(&loss).unwrap();
            opt.step(&mut model, &grads, tau).unwrap();
            let next = chi(&model, &assignment).unwrap();
            let ratio = next / prev;
            assert!(
                (ratio - expected).abs() / expected <= 1e-4,
                "ratio {ratio} vs expected {expected}"
            );
            prev = next;
        }
    }

    #[test]
    fn zero_gradient_contraction_and_lasso_shrink() {
        // With g = 0 and η = 0 the deviation factor is exactly 1 − τε.
        let clusters = vec![vec![0, 1]];
        let gamma = build_gamma(&clusters, 2).unwrap();
        let lambda = build_lambda(&clusters, 2, 0.0, 0.01).unwrap();
        let mut w = vec![1.0f32, 3.0];
        let g = vec![0.0f32, 0.0];
        csgd_step_matrix(&mut w, &g, &gamma, &lambda, 1, 2, 0.5);
        // deviations ±1 shrink by 1 − 0.5·0.01 = 0.995 around the fixed mean 2.
        assert!((w[0] - (2.0 - 0.995)).abs() <= 1e-6);
        assert!((w[1] - (2.0 + 0.995)).abs() <= 1e-6);

        // Group-Lasso with zero task gradient: norm drops by τ·strength.
        let kernel = Tensor::new([1, 1, 2, 2], vec![3.0, 0.0, 4.0, 0.0]).unwrap();
        // filter 0 = (3,4) with norm 5; filter 1 zero.
        let mut grad = vec![0.0f32; 4];
        apply_group_lasso(&kernel, &mut grad, &[0, 1], 2.0);
        let mut w = kernel.to_vec();
        sgd_update(&mut w, &grad, 0.1, 0.0);
        let norm = (w[0] * w[0] + w[2] * w[2]).sqrt();
        assert!((norm - (5.0 - 0.1 * 2.0)).abs() <= 1e-6, "norm {norm}");
        // The zero filter stays put (subgradient 0 at 0).
        assert_eq!(w[1], 0.0);
        assert_eq!(w[3], 0.0);
    }

    #[test]
    fn magnitude_keeps_largest_norms() {
        let kernel = Tensor::new([1, 1, 1, 4], vec![5.0, 1.0, 3.0, 2.0]).unwrap();
        assert_eq!(magnitude_remaining_set(&kernel, 2).unwrap(), vec![0, 2]);
        let tied = Tensor::new([1, 1, 1, 2], vec![1.0, 1.0]).unwrap();
        assert_eq!(magnitude_remaining_set(&tied, 1).unwrap(), vec![0]);
        assert!(magnitude_remaining_set(&tied, 0).is_err());
        assert!(magnitude_remaining_set(&tied, 3).is_err());
    }

    #[test]
    fn optimizer_touches_only_trainable_tensors() {
        let spec = toy_resnet([8, 8, 1], 4, &[[4, 4], [6, 6], [8, 8]], 1);
        let mut model = build_model(&spec, 5).unwrap();
        let mut base = BTreeMap::new();
        base.insert("stem".to_string(), even_clusters(4, 2).unwrap());
        let assignment = propagate_clusters(&spec, base).unwrap();
        let opt = CsgdOptimizer::new(&model, &assignment, 1e-4, 3e-3).unwrap();

        let mu_before = match &model.params["stem"] {
            LayerParams::Conv { mu, sigma, .. } => (mu.to_vec(), sigma.to_vec()),
            _ => unreachable!(),
        };

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::uniform([2, 8, 8, 1], -1.0, 1.0, &mut rng);
        let mut tape = GradTape::new();
        let logits = model.forward_train(&mut tape, &x, 0.0).unwrap();
        let loss = tape.softmax_xent(&logits, &[0, 1]).unwrap();
        let grads = tape.backward(&loss).unwrap();
        opt.step(&mut model, &grads, 0.01).unwrap();

        // momentum 0 keeps running stats frozen; the optimizer must not
        // touch them either.
        match &model.params["stem"] {
            LayerParams::Conv { mu, sigma, .. } => {
                assert_eq!(mu.to_vec(), mu_before.0);
                assert_eq!(sigma.to_vec(), mu_before.1);
            }
            _ => unreachable!(),
        }
    }

    #[test]
    fn dense_bn_slices_follow_their_pacesetter() {
        let spec = toy_densenet([6, 6, 1], 2, 4, 2, 2);
        let mut model = build_model(&spec, 9).unwrap();
        let mut base = BTreeMap::new();
        base.insert("stem".to_string(), even_clusters(4, 2).unwrap());
        let assignment = propagate_clusters(&spec, base).unwrap();
        let opt = CsgdOptimizer::new(&model, &assignment, 0.0, 0.25).unwrap();

        // Make the stem slice of d0bn's β maximally uneven, then verify the
        // centripetal pull contracts exactly that slice's cluster deviations.
        if let Some(LayerParams::Bn { beta, .. }) = model.params.get_mut("d0bn") {
            *beta = Tensor::new(beta.shape(), vec![1.0, 3.0, -1.0, 5.0]).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::uniform([2, 6, 6, 1], -1.0, 1.0, &mut rng);
        let mut tape = GradTape::new();
        let logits = model.forward_train(&mut tape, &x, 0.0).unwrap();
        let loss = tape.softmax_xent(&logits, &[0, 1]).unwrap();
        let grads = tape.backward(&loss).unwrap();

        let beta_grad = match &model.params["d0bn"] {
            LayerParams::Bn { beta, .. } => grads.grad(beta).unwrap().to_vec(),
            _ => unreachable!(),
        };
        let before = match &model.params["d0bn"] {
            LayerParams::Bn { beta, .. } => beta.to_vec(),
            _ => unreachable!(),
        };
        opt.step(&mut model, &grads, 0.1).unwrap();
        let after = match &model.params["d0bn"] {
            LayerParams::Bn { beta, .. } => beta.to_vec(),
            _ => unreachable!(),
        };

        // Clusters {0,1} and {2,3} on the stem: deviations within each pair
        // contract by 1 − τε = 0.975 with the averaged gradient applied.
        for pair in [[0usize, 1], [2, 3]] {
            let g_mean = (beta_grad[pair[0]] + beta_grad[pair[1]]) / 2.0;
            let w_mean = (before[pair[0]] + before[pair[1]]) / 2.0;
            for &j in &pair {
                let expect =
                    before[j] - 0.1 * (g_mean + 0.25 * (before[j] - w_mean));
                assert!(
                    (after[j] - expect).abs() <= 1e-6,
                    "channel {j}: {} vs {expect}",
                    after[j]
                );
            }
        }
    }

    proptest! {
        #[test]
        fn gamma_is_symmetric_row_stochastic_idempotent(
            c in 1usize..12,
            r_frac in 0.0f64..1.0,
        ) {
            let r = 1 + ((c - 1) as f64 * r_frac) as usize;
            let clusters = even_clusters(c, r).unwrap();
            let gamma = build_gamma(&clusters, c).unwrap();
            for m in 0..c {
                let row_sum: f32 = (0..c).map(|n| gamma[m * c + n]).sum();
                prop_assert!((row_sum - 1.0).abs() <= 1e-6);
                for n in 0..c {
                    prop_assert_eq!(gamma[m * c + n], gamma[n * c + m]);
                }
            }
            // Γ² = Γ (averaging twice is averaging once).
            let mut sq = vec![0.0f32; c * c];
            matmul(c, c, c, &gamma, &gamma, &mut sq);
            for (a, b) in sq.iter().zip(&gamma) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
