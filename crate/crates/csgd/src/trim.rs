//! Lossless structural trimming.
//!
//! After centripetal training the filters of each cluster coincide, so the
//! network computes the same function with one representative per cluster:
//!
//! 1. [`snap_clusters`] sets every cluster member exactly to the cluster
//!    mean (kernels and the γ/β/μ/σ tuple, plus the matching channel slices
//!    of standalone `bn` layers), reporting the largest pre-snap deviation.
//! 2. [`trim_network`] rebuilds the network with the smallest index of each
//!    cluster as the survivor. Consumers compensate exactly: the next
//!    convolution *sums* its kernel slices over each merged group (equal
//!    activations add linearly), and the classifier sums the matching
//!    weight rows.
//!
//! The same plan machinery with singleton groups implements
//! [`prune_discard`] — removal without compensation — for the magnitude
//! baseline, and [`zero_out_prune`] silences filters in place for the
//! group-Lasso baseline.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::error::{Error, Result};
use crate::graph::{LayerKind, INPUT_NAME};
use crate::model::{
    derive_constraint_groups, ConstraintKind, Follower, LayerParams, Model,
};
use crate::tensor::Tensor;

/// Channel groups of one layer output, each sorted ascending with the
/// surviving channel first; groups ordered by survivor.
type Plan = Vec<Vec<usize>>;

/// The survivors and the merge map of a trim, per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimPlan {
    /// Sorted surviving filter indices per clustered layer.
    pub remaining: BTreeMap<String, Vec<usize>>,
    /// Discarded filter → the survivor absorbing it.
    pub merge: BTreeMap<String, BTreeMap<usize, usize>>,
}

/// Survivor = smallest index of each cluster; everything else merges into it.
pub fn select_remaining(assignment: &ClusterAssignment) -> TrimPlan {
    let mut remaining = BTreeMap::new();
    let mut merge = BTreeMap::new();
    for (id, clusters) in &assignment.by_layer {
        let mut keep: Vec<usize> = clusters.iter().map(|c| c[0]).collect();
        keep.sort_unstable();
        let mut m = BTreeMap::new();
        for cluster in clusters {
            for &j in &cluster[1..] {
                m.insert(j, cluster[0]);
            }
        }
        remaining.insert(id.clone(), keep);
        merge.insert(id.clone(), m);
    }
    TrimPlan { remaining, merge }
}

/// Mean of `values` at `indices` (f64 accumulation).
fn mean_at(values: &[f32], indices: &[usize]) -> f32 {
    (indices.iter().map(|&j| values[j] as f64).sum::<f64>() / indices.len() as f64) as f32
}

/// Snaps every cluster to its mean and returns the snapped model together
/// with the largest pre-snap deviation (L∞ distance of any member value
/// from its cluster mean, across kernels, γ, β, μ, σ and governed `bn`
/// slices). A deviation above `tolerance` is the caller's cue to warn: the
/// snap still proceeds, but equivalence with the unsnapped model is no
/// longer near-exact.
pub fn snap_clusters(
    model: &Model,
    assignment: &ClusterAssignment,
    _tolerance: f32,
) -> Result<(Model, f32)> {
    let mut out = model.clone();
    let mut max_dev = 0.0f32;

    for (id, clusters) in &assignment.by_layer {
        let Some(LayerParams::Conv {
            kernel,
            gamma,
            beta,
            mu,
            sigma,
            ..
        }) = out.params.get_mut(id)
        else {
            return Err(Error::InvalidArgument(format!(
                "clustered layer {id:?} is not a convolution"
            )));
        };
        let c = kernel.shape()[3];
        let rows = kernel.len() / c;

        let mut kdata = kernel.to_vec();
        for cluster in clusters {
            for row in 0..rows {
                let mean = (cluster
                    .iter()
                    .map(|&j| kdata[row * c + j] as f64)
                    .sum::<f64>()
                    / cluster.len() as f64) as f32;
                for &j in cluster {
                    max_dev = max_dev.max((kdata[row * c + j] - mean).abs());
                    kdata[row * c + j] = mean;
                }
            }
        }
        *kernel = Tensor::new(kernel.shape(), kdata)?;

        for vec_ref in [gamma, beta, mu, sigma] {
            let mut v = vec_ref.to_vec();
            for cluster in clusters {
                let mean = mean_at(&v, cluster);
                for &j in cluster {
                    max_dev = max_dev.max((v[j] - mean).abs());
                    v[j] = mean;
                }
            }
            *vec_ref = Tensor::new(vec_ref.shape(), v)?;
        }
    }

    // Standalone bn slices governed by clustered pacesetters snap with the
    // pacesetter's clusters, shifted to the slice offset.
    for group in derive_constraint_groups(&model.spec)? {
        if group.kind != ConstraintKind::Dense {
            continue;
        }
        let Some(clusters) = assignment.by_layer.get(&group.pacesetter) else {
            continue;
        };
        for follower in &group.followers {
            let Follower::BnSlice { layer, offset } = follower else {
                continue;
            };
            let Some(LayerParams::Bn {
                gamma,
                beta,
                mu,
                sigma,
            }) = out.params.get_mut(layer)
            else {
                return Err(Error::InvalidArgument(format!(
                    "missing bn parameters for {layer:?}"
                )));
            };
            for vec_ref in [gamma, beta, mu, sigma] {
                let mut v = vec_ref.to_vec();
                for cluster in clusters {
                    let shifted: Vec<usize> = cluster.iter().map(|&j| offset + j).collect();
                    let mean = mean_at(&v, &shifted);
                    for &j in &shifted {
                        max_dev = max_dev.max((v[j] - mean).abs());
                        v[j] = mean;
                    }
                }
                *vec_ref = Tensor::new(vec_ref.shape(), v)?;
            }
        }
    }

    Ok((out, max_dev))
}

fn identity_plan(c: usize) -> Plan {
    (0..c).map(|j| vec![j]).collect()
}

/// Slices a per-channel vector at each group's survivor.
fn take_survivors(values: &Tensor, plan: &Plan) -> Result<Tensor> {
    let data = values.data();
    let out: Vec<f32> = plan.iter().map(|g| data[g[0]]).collect();
    Tensor::new([plan.len()], out)
}

/// Sums kernel input-channel slices over each group:
/// `K'[a,b,k',j] = Σ_{h ∈ group k'} K[a,b,h,j]` (f64 accumulation). Groups
/// of size one make this a plain slice, which is how discard-mode pruning
/// reuses the same code.
fn merge_kernel_inputs(kernel: &Tensor, plan: &Plan) -> Result<Tensor> {
    let [u, v, c_in, c_out] = kernel.dims4("kernel")?;
    let new_c_in = plan.len();
    let data = kernel.data();
    let mut out = vec![0.0f32; u * v * new_c_in * c_out];
    for ab in 0..u * v {
        for (k_new, group) in plan.iter().enumerate() {
            for j in 0..c_out {
                let sum: f64 = group
                    .iter()
                    .map(|&h| data[(ab * c_in + h) * c_out + j] as f64)
                    .sum();
                out[(ab * new_c_in + k_new) * c_out + j] = sum as f32;
            }
        }
    }
    Tensor::new([u, v, new_c_in, c_out], out)
}

/// Keeps each group's surviving kernel column:
/// `K'[a,b,k,j'] = K[a,b,k,survivor(j')]`.
fn take_kernel_outputs(kernel: &Tensor, plan: &Plan) -> Result<Tensor> {
    let [u, v, c_in, c_out] = kernel.dims4("kernel")?;
    let new_c_out = plan.len();
    let data = kernel.data();
    let mut out = vec![0.0f32; u * v * c_in * new_c_out];
    for abk in 0..u * v * c_in {
        for (j_new, group) in plan.iter().enumerate() {
            out[abk * new_c_out + j_new] = data[abk * c_out + group[0]];
        }
    }
    Tensor::new([u, v, c_in, new_c_out], out)
}

/// Sums classifier weight rows over each merged input-channel group, for
/// every spatial position of the flattened input.
fn merge_linear_rows(
    weight: &Tensor,
    plan: &Plan,
    c_old: usize,
) -> Result<Tensor> {
    let [d_in, units] = weight.dims2("classifier weight")?;
    if d_in % c_old != 0 {
        return Err(Error::ShapeMismatch {
            op: "trim classifier",
            left: format!("weight rows {d_in}"),
            right: format!("input channels {c_old}"),
        });
    }
    let positions = d_in / c_old;
    let c_new = plan.len();
    let data = weight.data();
    let mut out = vec![0.0f32; positions * c_new * units];
    for p in 0..positions {
        for (k_new, group) in plan.iter().enumerate() {
            for uidx in 0..units {
                let sum: f64 = group
                    .iter()
                    .map(|&h| data[(p * c_old + h) * units + uidx] as f64)
                    .sum();
                out[(p * c_new + k_new) * units + uidx] = sum as f32;
            }
        }
    }
    Tensor::new([positions * c_new, units], out)
}

/// Applies `plans` (channel groups per trimmed conv; identity elsewhere) to
/// the whole network, propagating through bn, pools, adds, concats and the
/// classifier. Shared code path for merge-mode trimming (multi-member
/// groups after snapping) and discard-mode pruning (singleton groups).
fn rebuild(model: &Model, plans_by_conv: &BTreeMap<String, Plan>) -> Result<Model> {
    let spec = &model.spec;
    let shapes = spec.validate()?;
    let mut out_spec = spec.clone();
    let mut out_params: BTreeMap<String, LayerParams> = BTreeMap::new();
    // Plan of each layer's output, in the layer's *old* channel space.
    let mut plans: BTreeMap<String, Plan> = BTreeMap::new();

    for layer in &spec.layers {
        let input_plan = |idx: usize, plans: &BTreeMap<String, Plan>| -> Plan {
            let src: &str = &layer.inputs[idx];
            if src == INPUT_NAME {
                identity_plan(spec.input[2])
            } else {
                plans[src].clone()
            }
        };
        let plan: Plan = match &layer.kind {
            LayerKind::Conv { .. } => {
                let in_plan = input_plan(0, &plans);
                let Some(LayerParams::Conv {
                    kernel,
                    gamma,
                    beta,
                    mu,
                    sigma,
                    has_bn,
                }) = model.params.get(&layer.id)
                else {
                    return Err(Error::InvalidArgument(format!(
                        "missing parameters for conv {:?}",
                        layer.id
                    )));
                };
                let own_plan = plans_by_conv
                    .get(&layer.id)
                    .cloned()
                    .unwrap_or_else(|| identity_plan(kernel.shape()[3]));

                let merged = merge_kernel_inputs(kernel, &in_plan)?;
                let new_kernel = take_kernel_outputs(&merged, &own_plan)?;
                out_params.insert(
                    layer.id.clone(),
                    LayerParams::Conv {
                        kernel: new_kernel,
                        gamma: take_survivors(gamma, &own_plan)?,
                        beta: take_survivors(beta, &own_plan)?,
                        mu: take_survivors(mu, &own_plan)?,
                        sigma: take_survivors(sigma, &own_plan)?,
                        has_bn: *has_bn,
                    },
                );
                if let Some(l) = out_spec.layers.iter_mut().find(|l| l.id == layer.id) {
                    if let LayerKind::Conv { filters, .. } = &mut l.kind {
                        *filters = own_plan.len();
                    }
                }
                own_plan
            }
            LayerKind::Bn { .. } => {
                let in_plan = input_plan(0, &plans);
                let Some(LayerParams::Bn {
                    gamma,
                    beta,
                    mu,
                    sigma,
                }) = model.params.get(&layer.id)
                else {
                    return Err(Error::InvalidArgument(format!(
                        "missing parameters for bn {:?}",
                        layer.id
                    )));
                };
                out_params.insert(
                    layer.id.clone(),
                    LayerParams::Bn {
                        gamma: take_survivors(gamma, &in_plan)?,
                        beta: take_survivors(beta, &in_plan)?,
                        mu: take_survivors(mu, &in_plan)?,
                        sigma: take_survivors(sigma, &in_plan)?,
                    },
                );
                in_plan
            }
            LayerKind::Pool { .. } => input_plan(0, &plans),
            LayerKind::Add { .. } => {
                let a = input_plan(0, &plans);
                let b = input_plan(1, &plans);
                if a != b {
                    return Err(Error::ConstraintViolation(format!(
                        "follower plan mismatch at add {:?}: the two sides keep \
                         different channel groups ({:?} vs {:?}); residual \
                         followers must share their pacesetter's clustering",
                        layer.id, a, b
                    )));
                }
                a
            }
            LayerKind::Concat => {
                let mut plan = Vec::new();
                let mut offset = 0;
                for (idx, src) in layer.inputs.iter().enumerate() {
                    let part = input_plan(idx, &plans);
                    let width = if src == INPUT_NAME {
                        spec.input[2]
                    } else {
                        shapes[src][2]
                    };
                    for group in part {
                        plan.push(group.iter().map(|&j| offset + j).collect());
                    }
                    offset += width;
                }
                plan
            }
            LayerKind::Linear { .. } => {
                let in_plan = input_plan(0, &plans);
                let src: &str = &layer.inputs[0];
                let c_old = if src == INPUT_NAME {
                    spec.input[2]
                } else {
                    shapes[src][2]
                };
                let Some(LayerParams::Linear { weight, bias }) =
                    model.params.get(&layer.id)
                else {
                    return Err(Error::InvalidArgument(format!(
                        "missing parameters for linear {:?}",
                        layer.id
                    )));
                };
                out_params.insert(
                    layer.id.clone(),
                    LayerParams::Linear {
                        weight: merge_linear_rows(weight, &in_plan, c_old)?,
                        bias: bias.clone(),
                    },
                );
                identity_plan(weight.shape()[1])
            }
        };
        plans.insert(layer.id.clone(), plan);
    }

    out_spec.validate()?;
    Ok(Model {
        spec: out_spec,
        params: out_params,
    })
}

/// Trims every clustered convolution down to one filter per cluster,
/// merging consumers exactly. Constraint groups are honored implicitly:
/// residual followers carry the pacesetter's clusters in `assignment` (via
/// cluster propagation), and a mismatch surfaces as a *follower plan
/// mismatch* error at the offending add node.
pub fn trim_network(model: &Model, assignment: &ClusterAssignment) -> Result<Model> {
    let mut plans = BTreeMap::new();
    for (id, clusters) in &assignment.by_layer {
        plans.insert(id.clone(), clusters.clone());
    }
    rebuild(model, &plans)
}

/// Removes every filter *not* listed in `remaining` without compensation
/// (the magnitude baseline): consumers just lose those input slices.
pub fn prune_discard(
    model: &Model,
    remaining: &BTreeMap<String, Vec<usize>>,
) -> Result<Model> {
    let mut plans = BTreeMap::new();
    for (id, keep) in remaining {
        let (kernel, ..) = model.conv(id)?;
        let c = kernel.shape()[3];
        if keep.is_empty() || keep.iter().any(|&j| j >= c) {
            return Err(Error::InvalidArgument(format!(
                "invalid remaining set for {id:?}: {keep:?} of {c} filters"
            )));
        }
        let mut sorted = keep.clone();
        sorted.sort_unstable();
        sorted.dedup();
        plans.insert(id.clone(), sorted.iter().map(|&j| vec![j]).collect());
    }
    rebuild(model, &plans)
}

/// Silences the listed filters in place: kernel columns, γ, β and μ go to
/// zero, so each silenced channel outputs exactly zero in eval mode and
/// contributes nothing downstream. Standalone `bn` slices governed by the
/// layer are silenced too. The architecture keeps its widths.
pub fn zero_out_prune(
    model: &Model,
    pruned: &BTreeMap<String, Vec<usize>>,
) -> Result<Model> {
    let mut out = model.clone();
    for (id, set) in pruned {
        let Some(LayerParams::Conv {
            kernel,
            gamma,
            beta,
            mu,
            ..
        }) = out.params.get_mut(id)
        else {
            return Err(Error::InvalidArgument(format!(
                "layer {id:?} is not a convolution"
            )));
        };
        let c = kernel.shape()[3];
        let mut kdata = kernel.to_vec();
        for row in 0..kernel.len() / c {
            for &j in set {
                kdata[row * c + j] = 0.0;
            }
        }
        *kernel = Tensor::new(kernel.shape(), kdata)?;
        for vec_ref in [gamma, beta, mu] {
            let mut v = vec_ref.to_vec();
            for &j in set {
                v[j] = 0.0;
            }
            *vec_ref = Tensor::new(vec_ref.shape(), v)?;
        }
    }

    for group in derive_constraint_groups(&model.spec)? {
        if group.kind != ConstraintKind::Dense {
            continue;
        }
        let Some(set) = pruned.get(&group.pacesetter) else {
            continue;
        };
        for follower in &group.followers {
            let Follower::BnSlice { layer, offset } = follower else {
                continue;
            };
            let Some(LayerParams::Bn {
                gamma, beta, mu, ..
            }) = out.params.get_mut(layer)
            else {
                continue;
            };
            for vec_ref in [gamma, beta, mu] {
                let mut v = vec_ref.to_vec();
                for &j in set {
                    v[offset + j] = 0.0;
                }
                *vec_ref = Tensor::new(vec_ref.shape(), v)?;
            }
        }
    }
    Ok(out)
}

/// Max absolute logit difference of two models over `n_samples` random
/// inputs (uniform in [−1, 1], seeded). The models must agree on input
/// shape and class count.
pub fn verify_equivalence(a: &Model, b: &Model, n_samples: usize, seed: u64) -> Result<f32> {
    if a.spec.input != b.spec.input || a.spec.classes != b.spec.classes {
        return Err(Error::ShapeMismatch {
            op: "verify_equivalence",
            left: format!("{:?} → {}", a.spec.input, a.spec.classes),
            right: format!("{:?} → {}", b.spec.input, b.spec.classes),
        });
    }
    let [h, w, c] = a.spec.input;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_diff = 0.0f32;
    let batch = 16;
    let mut done = 0;
    while done < n_samples {
        let n = batch.min(n_samples - done);
        let x = Tensor::uniform([n, h, w, c], -1.0, 1.0, &mut rng);
        let la = a.forward_eval(&x)?;
        let lb = b.forward_eval(&x)?;
        max_diff = max_diff.max(la.max_abs_diff(&lb));
        done += n;
    }
    Ok(max_diff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::{even_clusters, propagate_clusters, ClusterAssignment};
    use crate::graph::{toy_densenet, toy_resnet, toy_vgg, NetworkSpec};
    use crate::model::build_model;

    fn assignment_for(
        spec: &NetworkSpec,
        entries: &[(&str, usize, usize)],
    ) -> ClusterAssignment {
        let mut base = BTreeMap::new();
        for (id, c, r) in entries {
            base.insert(id.to_string(), even_clusters(*c, *r).unwrap());
        }
        propagate_clusters(spec, base).unwrap()
    }

    #[test]
    fn select_remaining_worked_example() {
        // 6 filters in 4 clusters {0,1},{2,3},{4},{5} → survivors 0,2,4,5;
        // 1 merges into 0 and 3 into 2.
        let mut assignment = ClusterAssignment::default();
        assignment
            .by_layer
            .insert("c".into(), even_clusters(6, 4).unwrap());
        let plan = select_remaining(&assignment);
        assert_eq!(plan.remaining["c"], vec![0, 2, 4, 5]);
        assert_eq!(
            plan.merge["c"],
            BTreeMap::from([(1usize, 0usize), (3, 2)])
        );
    }

    #[test]
    fn snap_reports_max_deviation() {
        let spec = toy_vgg([4, 4, 1], 2, &[vec![2]]);
        let mut model = build_model(&spec, 0).unwrap();
        // γ = [1.0, 1.000002] in one cluster → mean 1.000001, deviation 1e-6.
        if let Some(LayerParams::Conv { kernel, gamma, .. }) = model.params.get_mut("s0c0")
        {
            *gamma = Tensor::new([2], vec![1.0, 1.000002]).unwrap();
            // Make both kernels identical so γ dominates the deviation.
            let k = kernel.to_vec();
            let c = 2;
            let mut data = k.clone();
            for row in 0..kernel.len() / c {
                data[row * c + 1] = data[row * c];
            }
            *kernel = Tensor::new(kernel.shape(), data).unwrap();
        }
        let mut assignment = ClusterAssignment::default();
        assignment
            .by_layer
            .insert("s0c0".into(), vec![vec![0, 1]]);
        let (snapped, dev) = snap_clusters(&model, &assignment, 1e-3).unwrap();
        assert!(
            (5e-7..2e-6).contains(&dev),
            "deviation {dev} not within the f32 band around 1e-6"
        );
        if let Some(LayerParams::Conv { gamma, .. }) = snapped.params.get("s0c0") {
            assert_eq!(gamma.data()[0], gamma.data()[1]);
            assert!((gamma.data()[0] - 1.000001).abs() <= 1e-6);
        }
    }

    #[test]
    fn plain_stack_trims_losslessly_after_snap() {
        let spec = toy_vgg([8, 8, 1], 4, &[vec![6, 6], vec![8]]);
        let model = build_model(&spec, 21).unwrap();
        let assignment = assignment_for(
            &spec,
            &[("s0c0", 6, 3), ("s0c1", 6, 4), ("s1c0", 8, 4)],
        );
        let (snapped, dev) = snap_clusters(&model, &assignment, 1e-3).unwrap();
        assert!(dev > 1e-3, "fresh init should deviate, got {dev}");

        let trimmed = trim_network(&snapped, &assignment).unwrap();
        assert_eq!(
            trimmed.spec.conv_widths(),
            vec![
                ("s0c0".to_string(), 3),
                ("s0c1".to_string(), 4),
                ("s1c0".to_string(), 4)
            ]
        );
        let diff = verify_equivalence(&snapped, &trimmed, 20, 77).unwrap();
        assert!(diff <= 1e-4, "plain trim not lossless: {diff}");
    }

    #[test]
    fn residual_stack_trims_losslessly_after_snap() {
        let spec = toy_resnet([8, 8, 1], 4, &[[4, 4], [6, 6], [8, 8]], 2);
        let model = build_model(&spec, 22).unwrap();
        let assignment = assignment_for(
            &spec,
            &[
                ("stem", 4, 2),
                ("s1proj", 6, 3),
                ("s2proj", 8, 4),
                ("s0b0c1", 4, 2),
                ("s0b1c1", 4, 2),
                ("s1b0c1", 6, 3),
                ("s1b1c1", 6, 3),
                ("s2b0c1", 8, 4),
                ("s2b1c1", 8, 4),
            ],
        );
        let (snapped, _) = snap_clusters(&model, &assignment, 1e-3).unwrap();
        let trimmed = trim_network(&snapped, &assignment).unwrap();
        // Followers track their pacesetters' widths.
        let widths: BTreeMap<String, usize> =
            trimmed.spec.conv_widths().into_iter().collect();
        assert_eq!(widths["stem"], 2);
        assert_eq!(widths["s0b0c2"], 2);
        assert_eq!(widths["s1proj"], 3);
        assert_eq!(widths["s1b1c2"], 3);
        assert_eq!(widths["s2b0c2"], 4);

        let diff = verify_equivalence(&snapped, &trimmed, 20, 78).unwrap();
        assert!(diff <= 1e-4, "residual trim not lossless: {diff}");
    }

    #[test]
    fn dense_stack_trims_losslessly_after_snap() {
        let spec = toy_densenet([8, 8, 1], 4, 6, 4, 3);
        let model = build_model(&spec, 23).unwrap();
        let assignment = assignment_for(
            &spec,
            &[
                ("stem", 6, 3),
                ("d0conv", 4, 2),
                ("d1conv", 4, 2),
                ("d2conv", 4, 3),
            ],
        );
        let (snapped, _) = snap_clusters(&model, &assignment, 1e-3).unwrap();
        let trimmed = trim_network(&snapped, &assignment).unwrap();
        let widths: BTreeMap<String, usize> =
            trimmed.spec.conv_widths().into_iter().collect();
        assert_eq!(widths["stem"], 3);
        assert_eq!(widths["d0conv"], 2);
        assert_eq!(widths["d2conv"], 3);
        // final_bn covers 3 + 2 + 2 + 3 = 10 surviving channels.
        if let Some(LayerParams::Bn { gamma, .. }) = trimmed.params.get("final_bn") {
            assert_eq!(gamma.len(), 10);
        } else {
            panic!("final_bn missing");
        }

        let diff = verify_equivalence(&snapped, &trimmed, 20, 79).unwrap();
        assert!(diff <= 1e-4, "dense trim not lossless: {diff}");
    }

    #[test]
    fn unsnapped_trim_is_not_equivalent() {
        // Negative control: trimming without snapping (deviations O(0.1))
        // must change the function far beyond the equivalence tolerance.
        let spec = toy_vgg([8, 8, 1], 4, &[vec![6]]);
        let model = build_model(&spec, 24).unwrap();
        let assignment = assignment_for(&spec, &[("s0c0", 6, 3)]);
        let trimmed = trim_network(&model, &assignment).unwrap();
        let diff = verify_equivalence(&model, &trimmed, 20, 80).unwrap();
        assert!(diff > 1e-3, "expected a clear mismatch, got {diff}");
    }

    #[test]
    fn missing_follower_assignment_is_a_plan_mismatch() {
        let spec = toy_resnet([8, 8, 1], 4, &[[4, 4], [6, 6], [8, 8]], 1);
        let model = build_model(&spec, 25).unwrap();
        // Cluster the stem only, bypassing propagation: the stage-0 add now
        // sees a trimmed shortcut against an untrimmed residual branch.
        let mut assignment = ClusterAssignment::default();
        assignment
            .by_layer
            .insert("stem".into(), even_clusters(4, 2).unwrap());
        let err = trim_network(&model, &assignment).unwrap_err().to_string();
        assert!(
            err.contains("follower plan mismatch"),
            "unexpected error: {err}"
        );
    }

    #[test]
    fn zeroed_filters_discard_losslessly() {
        // Zero-silenced channels contribute nothing, so discarding them is
        // exact — which validates both zero_out_prune and prune_discard.
        let spec = toy_vgg([8, 8, 1], 4, &[vec![6, 5]]);
        let model = build_model(&spec, 26).unwrap();
        let pruned = BTreeMap::from([
            ("s0c0".to_string(), vec![1usize, 4]),
            ("s0c1".to_string(), vec![0usize, 3]),
        ]);
        let zeroed = zero_out_prune(&model, &pruned).unwrap();
        let remaining = BTreeMap::from([
            ("s0c0".to_string(), vec![0usize, 2, 3, 5]),
            ("s0c1".to_string(), vec![1usize, 2, 4]),
        ]);
        let discarded = prune_discard(&zeroed, &remaining).unwrap();
        let widths: BTreeMap<String, usize> =
            discarded.spec.conv_widths().into_iter().collect();
        assert_eq!(widths["s0c0"], 4);
        assert_eq!(widths["s0c1"], 3);
        let diff = verify_equivalence(&zeroed, &discarded, 20, 81).unwrap();
        assert!(diff <= 1e-5, "zeroed discard not lossless: {diff}");
    }
}
