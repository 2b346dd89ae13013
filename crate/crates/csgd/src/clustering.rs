//! Filter clustering.
//!
//! Training drives all filters of a cluster to a common point, and trimming
//! later keeps one representative per cluster, so the cluster layout *is*
//! the pruned architecture. Three schemes are provided: k-means on the raw
//! kernel values of each filter, evenly sized contiguous blocks, and an
//! imbalanced layout (one large cluster plus singletons — the singleton
//! filters survive trimming unchanged).
//!
//! Constrained layers never receive their own clustering: residual
//! followers copy their pacesetter's clusters via [`propagate_clusters`].

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkSpec};
use crate::model::{derive_constraint_groups, ConstraintKind, Follower, Model};
use crate::tensor::Tensor;

/// Disjoint filter-index clusters covering `0..c`, each sorted ascending,
/// ordered by smallest member.
pub type Clusters = Vec<Vec<usize>>;

/// Cluster layout for every clustered convolution of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClusterAssignment {
    pub by_layer: BTreeMap<String, Clusters>,
}

/// How filters are grouped into clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterScheme {
    #[serde(rename = "kmeans")]
    KMeans,
    Even,
    Imbalanced,
}

/// Validates that `clusters` is a partition of `0..c` into non-empty parts.
pub fn validate_clusters(clusters: &Clusters, c: usize) -> Result<()> {
    let mut seen = vec![false; c];
    for cluster in clusters {
        if cluster.is_empty() {
            return Err(Error::InvalidArgument("empty cluster".into()));
        }
        for &j in cluster {
            if j >= c {
                return Err(Error::InvalidArgument(format!(
                    "filter index {j} out of range for {c} filters"
                )));
            }
            if seen[j] {
                return Err(Error::InvalidArgument(format!(
                    "filter index {j} appears in two clusters"
                )));
            }
            seen[j] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::InvalidArgument(
            "clusters do not cover every filter".into(),
        ));
    }
    Ok(())
}

fn check_counts(c: usize, r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::InvalidArgument("cluster count must be positive".into()));
    }
    if r > c {
        return Err(Error::InvalidArgument(format!(
            "cannot form {r} clusters from {c} filters"
        )));
    }
    Ok(())
}

/// Contiguous blocks of near-equal size: the first `c mod r` clusters get
/// `⌈c/r⌉` filters, the rest `⌊c/r⌋`.
pub fn even_clusters(c: usize, r: usize) -> Result<Clusters> {
    check_counts(c, r)?;
    let small = c / r;
    let big_count = c % r;
    let mut clusters = Vec::with_capacity(r);
    let mut next = 0;
    for i in 0..r {
        let size = if i < big_count { small + 1 } else { small };
        clusters.push((next..next + size).collect());
        next += size;
    }
    Ok(clusters)
}

/// One large cluster holding the first `c − r + 1` filters, then singletons.
/// Filters in singleton clusters survive trimming unchanged, so this layout
/// concentrates all the squeezing pressure on the leading block.
pub fn imbalanced_clusters(c: usize, r: usize) -> Result<Clusters> {
    check_counts(c, r)?;
    let head = c - r + 1;
    let mut clusters = vec![(0..head).collect::<Vec<_>>()];
    clusters.extend((head..c).map(|j| vec![j]));
    Ok(clusters)
}

/// k-means over arbitrary feature rows (k-means++ seeding, Lloyd
/// iterations, deterministic for a given seed). Ties in the assignment step
/// go to the lower-indexed centroid; emptied clusters are re-seeded with
/// the point farthest from its centroid.
pub fn kmeans_clusters(rows: &[Vec<f32>], r: usize, seed: u64) -> Result<Clusters> {
    let (clusters, _) = lloyd(rows, r, seed, 100)?;
    Ok(clusters)
}

/// Within-cluster sum of squared distances to cluster means.
fn sse(rows: &[Vec<f64>], assign: &[usize], r: usize) -> f64 {
    let d = rows[0].len();
    let mut sums = vec![vec![0.0f64; d]; r];
    let mut counts = vec![0usize; r];
    for (row, &a) in rows.iter().zip(assign) {
        counts[a] += 1;
        for (s, x) in sums[a].iter_mut().zip(row) {
            *s += x;
        }
    }
    let mut total = 0.0;
    for (row, &a) in rows.iter().zip(assign) {
        for (s, x) in sums[a].iter().zip(row) {
            let mean = s / counts[a] as f64;
            total += (x - mean) * (x - mean);
        }
    }
    total
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn lloyd(rows32: &[Vec<f32>], r: usize, seed: u64, max_iters: usize) -> Result<(Clusters, Vec<f64>)> {
    let n = rows32.len();
    check_counts(n, r)?;
    let d = rows32[0].len();
    if rows32.iter().any(|row| row.len() != d) {
        return Err(Error::InvalidArgument(
            "feature rows have different lengths".into(),
        ));
    }
    let rows: Vec<Vec<f64>> = rows32
        .iter()
        .map(|row| row.iter().map(|&x| x as f64).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding: first centroid uniform, the rest sampled with
    // probability proportional to squared distance from the nearest chosen
    // centroid (greedy farthest fallback when all distances vanish).
    let mut centroids: Vec<Vec<f64>> = vec![rows[rng.random_range(0..n)].clone()];
    while centroids.len() < r {
        let d2: Vec<f64> = rows
            .iter()
            .map(|row| {
                centroids
                    .iter()
                    .map(|c| dist2(row, c))
                    .fold(f64::MAX, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            // All points coincide with some centroid; any point works.
            rng.random_range(0..n)
        };
        centroids.push(rows[pick].clone());
    }

    let mut assign = vec![0usize; n];
    let mut trace = Vec::new();
    for _ in 0..max_iters {
        // Assignment step; ties go to the lower centroid index.
        let mut next = vec![0usize; n];
        for (i, row) in rows.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::MAX;
            for (ci, c) in centroids.iter().enumerate() {
                let dd = dist2(row, c);
                if dd < best_d {
                    best_d = dd;
                    best = ci;
                }
            }
            next[i] = best;
        }

        // Re-seed emptied clusters with the farthest point from its own
        // centroid, never emptying another cluster in the process.
        loop {
            let mut counts = vec![0usize; r];
            for &a in &next {
                counts[a] += 1;
            }
            let Some(empty) = counts.iter().position(|&c| c == 0) else {
                break;
            };
            let donor = (0..n)
                .filter(|&i| counts[next[i]] >= 2)
                .max_by(|&a, &b| {
                    dist2(&rows[a], &centroids[next[a]])
                        .total_cmp(&dist2(&rows[b], &centroids[next[b]]))
                })
                .expect("n >= r guarantees a donor");
            next[donor] = empty;
        }

        let converged = next == assign && !trace.is_empty();
        assign = next;
        trace.push(sse(&rows, &assign, r));
        if converged {
            break;
        }

        // Update step: centroids move to cluster means.
        let mut sums = vec![vec![0.0f64; d]; r];
        let mut counts = vec![0usize; r];
        for (row, &a) in rows.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(row) {
                *s += x;
            }
        }
        for (c, (sum, count)) in centroids.iter_mut().zip(sums.iter().zip(&counts)) {
            for (cc, s) in c.iter_mut().zip(sum) {
                *cc = s / *count as f64;
            }
        }
    }

    let mut clusters: Clusters = vec![Vec::new(); r];
    for (i, &a) in assign.iter().enumerate() {
        clusters[a].push(i);
    }
    clusters.retain(|c| !c.is_empty());
    clusters.sort_by_key(|c| c[0]);
    Ok((clusters, trace))
}

/// Flattened kernel values of each filter: row `j` is `kernel[:, :, :, j]`.
pub fn filter_features(kernel: &Tensor) -> Result<Vec<Vec<f32>>> {
    let [_, _, _, c_out] = kernel.dims4("kernel")?;
    let k = kernel.len() / c_out;
    let data = kernel.data();
    let mut rows = vec![Vec::with_capacity(k); c_out];
    for (i, &x) in data.iter().enumerate() {
        rows[i % c_out].push(x);
    }
    Ok(rows)
}

/// Copies each residual pacesetter's clusters onto its follower
/// convolutions. `base` must cluster pacesetters and free layers only;
/// assigning a follower directly is an error because its layout is not its
/// own to choose.
pub fn propagate_clusters(
    spec: &NetworkSpec,
    base: BTreeMap<String, Clusters>,
) -> Result<ClusterAssignment> {
    let shapes = spec.validate()?;
    for (id, clusters) in &base {
        let layer = spec
            .layer(id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown layer {id:?}")))?;
        if !matches!(layer.kind, LayerKind::Conv { .. }) {
            return Err(Error::InvalidArgument(format!(
                "layer {id:?} is not a convolution and cannot be clustered"
            )));
        }
        validate_clusters(clusters, shapes[id][2])?;
    }

    let mut by_layer = base;
    for group in derive_constraint_groups(spec)? {
        if group.kind != ConstraintKind::Residual {
            continue;
        }
        let Some(clusters) = by_layer.get(&group.pacesetter).cloned() else {
            continue;
        };
        for follower in &group.followers {
            let Follower::Conv(id) = follower else {
                continue;
            };
            if by_layer.contains_key(id) {
                return Err(Error::ConstraintViolation(format!(
                    "layer {id:?} is a follower of {:?} and cannot carry its own clustering",
                    group.pacesetter
                )));
            }
            by_layer.insert(id.clone(), clusters.clone());
        }
    }
    Ok(ClusterAssignment { by_layer })
}

/// Builds a full assignment for a model: each (layer → cluster count) in
/// `targets` is clustered with `scheme`, then residual followers inherit
/// their pacesetter's layout.
pub fn assign_for_model(
    model: &Model,
    scheme: ClusterScheme,
    targets: &BTreeMap<String, usize>,
    seed: u64,
) -> Result<ClusterAssignment> {
    let mut base = BTreeMap::new();
    for (id, &r) in targets {
        let (kernel, ..) = model.conv(id)?;
        let c = kernel.shape()[3];
        let clusters = match scheme {
            ClusterScheme::Even => even_clusters(c, r)?,
            ClusterScheme::Imbalanced => imbalanced_clusters(c, r)?,
            ClusterScheme::KMeans => {
                // Per-layer seed offset keeps layers decorrelated while the
                // whole assignment stays reproducible.
                let layer_seed = seed.wrapping_add(stable_hash(id));
                kmeans_clusters(&filter_features(kernel)?, r, layer_seed)?
            }
        };
        base.insert(id.clone(), clusters);
    }
    propagate_clusters(&model.spec, base)
}

/// FNV-1a; stable across runs and platforms, unlike `DefaultHasher`.
fn stable_hash(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::toy_resnet;
    use crate::model::build_model;
    use proptest::prelude::*;

    #[test]
    fn even_layout() {
        assert_eq!(
            even_clusters(6, 4).unwrap(),
            vec![vec![0, 1], vec![2, 3], vec![4], vec![5]]
        );
        assert_eq!(
            even_clusters(5, 2).unwrap(),
            vec![vec![0, 1, 2], vec![3, 4]]
        );
        assert_eq!(
            even_clusters(4, 4).unwrap(),
            vec![vec![0], vec![1], vec![2], vec![3]]
        );
        assert_eq!(even_clusters(3, 1).unwrap(), vec![vec![0, 1, 2]]);
        assert!(even_clusters(3, 0).is_err());
        assert!(even_clusters(3, 4).is_err());
    }

    #[test]
    fn imbalanced_layout() {
        assert_eq!(
            imbalanced_clusters(6, 4).unwrap(),
            vec![vec![0, 1, 2], vec![3], vec![4], vec![5]]
        );
        assert_eq!(
            imbalanced_clusters(8, 5).unwrap(),
            vec![vec![0, 1, 2, 3], vec![4], vec![5], vec![6], vec![7]]
        );
    }

    /// Exhaustive minimum-SSE 2-partition (the independent oracle).
    fn best_two_partition_sse(rows: &[Vec<f32>]) -> f64 {
        let n = rows.len();
        let rows64: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect();
        let mut best = f64::MAX;
        // Fix point 0 in cluster 0 to quotient out label symmetry; skip the
        // all-in-one assignment (clusters must be non-empty).
        for mask in 1..(1u32 << (n - 1)) {
            let assign: Vec<usize> = (0..n)
                .map(|i| if i == 0 { 0 } else { ((mask >> (i - 1)) & 1) as usize })
                .collect();
            best = best.min(sse(&rows64, &assign, 2));
        }
        best
    }

    #[test]
    fn kmeans_matches_worked_example() {
        let rows = vec![vec![0.0], vec![0.01], vec![10.0], vec![10.01]];
        let clusters = kmeans_clusters(&rows, 2, 0).unwrap();
        assert_eq!(clusters, vec![vec![0, 1], vec![2, 3]]);

        // And the result is the exhaustive-search optimum.
        let rows64: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|&x| x as f64).collect())
            .collect();
        let assign = vec![0, 0, 1, 1];
        assert!((sse(&rows64, &assign, 2) - best_two_partition_sse(&rows)).abs() < 1e-12);
    }

    #[test]
    fn kmeans_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let rows: Vec<Vec<f32>> = (0..12)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let a = kmeans_clusters(&rows, 4, 7).unwrap();
        let b = kmeans_clusters(&rows, 4, 7).unwrap();
        assert_eq!(a, b);
        validate_clusters(&a, 12).unwrap();
        assert_eq!(a.len(), 4);
    }

    #[test]
    fn kmeans_handles_duplicate_points() {
        let rows = vec![vec![1.0, 2.0]; 6];
        let clusters = kmeans_clusters(&rows, 3, 1).unwrap();
        validate_clusters(&clusters, 6).unwrap();
        assert_eq!(clusters.len(), 3);
    }

    #[test]
    fn filter_features_extracts_columns() {
        // kernel [1,1,2,3]: layout [c_in, c_out] = [[1,2,3],[4,5,6]].
        let kernel = Tensor::new([1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let rows = filter_features(&kernel).unwrap();
        assert_eq!(rows, vec![vec![1., 4.], vec![2., 5.], vec![3., 6.]]);
    }

    #[test]
    fn propagation_copies_pacesetter_layout() {
        let spec = toy_resnet([8, 8, 1], 4, &[[4, 4], [6, 6], [8, 8]], 2);
        let mut base = BTreeMap::new();
        base.insert("stem".to_string(), even_clusters(4, 2).unwrap());
        base.insert("s1proj".to_string(), even_clusters(6, 3).unwrap());
        let assignment = propagate_clusters(&spec, base).unwrap();
        assert_eq!(assignment.by_layer["s0b0c2"], even_clusters(4, 2).unwrap());
        assert_eq!(assignment.by_layer["s0b1c2"], even_clusters(4, 2).unwrap());
        assert_eq!(assignment.by_layer["s1b0c2"], even_clusters(6, 3).unwrap());
        assert!(!assignment.by_layer.contains_key("s2b0c2"));

        // Followers cannot be clustered directly.
        let mut bad = BTreeMap::new();
        bad.insert("s0b0c2".to_string(), even_clusters(4, 2).unwrap());
        bad.insert("stem".to_string(), even_clusters(4, 2).unwrap());
        assert!(propagate_clusters(&spec, bad).is_err());
    }

    #[test]
    fn assign_for_model_covers_targets_and_followers() {
        let spec = toy_resnet([8, 8, 1], 4, &[[4, 4], [6, 6], [8, 8]], 1);
        let model = build_model(&spec, 11).unwrap();
        let mut targets = BTreeMap::new();
        targets.insert("stem".to_string(), 2usize);
        targets.insert("s0b0c1".to_string(), 2usize);
        let assignment =
            assign_for_model(&model, ClusterScheme::KMeans, &targets, 5).unwrap();
        validate_clusters(&assignment.by_layer["stem"], 4).unwrap();
        validate_clusters(&assignment.by_layer["s0b0c1"], 4).unwrap();
        // The stage-0 follower inherits the stem's layout.
        assert_eq!(
            assignment.by_layer["s0b0c2"],
            assignment.by_layer["stem"]
        );
    }

    proptest! {
        #[test]
        fn kmeans_always_returns_a_valid_partition(
            seed in 0u64..1000,
            n in 1usize..32,
            r_frac in 0.0f64..1.0,
            d in 1usize..4,
        ) {
            let r = 1 + ((n - 1) as f64 * r_frac) as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            let (clusters, trace) = lloyd(&rows, r, seed, 100).unwrap();
            validate_clusters(&clusters, n).unwrap();
            prop_assert_eq!(clusters.len(), r);
            // Lloyd iterations never increase the objective.
            for pair in trace.windows(2) {
                prop_assert!(pair[1] <= pair[0] + 1e-9, "objective rose: {:?}", pair);
            }
        }

        #[test]
        fn even_and_imbalanced_are_valid_partitions(c in 1usize..64, r_frac in 0.0f64..1.0) {
            let r = 1 + ((c - 1) as f64 * r_frac) as usize;
            let even = even_clusters(c, r).unwrap();
            validate_clusters(&even, c).unwrap();
            prop_assert_eq!(even.len(), r);
            // Sizes differ by at most one, larger blocks first.
            let sizes: Vec<usize> = even.iter().map(|cl| cl.len()).collect();
            prop_assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(sizes[0] - sizes[sizes.len() - 1] <= 1);

            let imb = imbalanced_clusters(c, r).unwrap();
            validate_clusters(&imb, c).unwrap();
            prop_assert_eq!(imb.len(), r);
            prop_assert_eq!(imb[0].len(), c - r + 1);
        }
    }
}
