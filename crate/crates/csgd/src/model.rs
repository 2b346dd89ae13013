//! Parameterized networks.
//!
//! A [`Model`] binds tensors to every parameterized layer of a
//! [`NetworkSpec`] and runs forward passes in eval mode (running statistics)
//! or train mode (batch statistics recorded on a gradient tape, running
//! statistics updated by exponential moving average).
//!
//! The module also derives *constraint groups*: structural couplings that
//! force several layers to share one clustering so that channel removal
//! stays consistent. Two couplings exist:
//!
//! * **Residual**: convolutions whose outputs are aliased by elementwise
//!   add nodes (shortcut and residual branch) must be clustered identically.
//!   The governing layer — the *pacesetter* — is the unique 1×1 projection
//!   if the group has one, otherwise its topologically first convolution.
//! * **Dense**: a convolution whose output is normalized by standalone `bn`
//!   layers (through channel concatenation) governs those bn channels; each
//!   follower is a (bn layer, channel offset) slice.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{LayerKind, NetworkSpec, PoolOp, INPUT_NAME};
use crate::ops::{self, BN_STABILIZER};
use crate::tape::GradTape;
use crate::tensor::Tensor;

/// Tensors of one layer. Convolutions always carry the full normalization
/// tuple: with `has_bn == false`, `gamma`/`mu`/`sigma` stay fixed at 1/0/1
/// and `beta` acts as a plain bias, so trimming and checkpoints treat every
/// convolution uniformly.
#[derive(Debug, Clone)]
pub enum LayerParams {
    Conv {
        /// `[u, v, c_in, c_out]`
        kernel: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mu: Tensor,
        sigma: Tensor,
        has_bn: bool,
    },
    Bn {
        gamma: Tensor,
        beta: Tensor,
        mu: Tensor,
        sigma: Tensor,
    },
    Linear {
        /// `[d_in, units]`
        weight: Tensor,
        bias: Tensor,
    },
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: NetworkSpec,
    /// Keyed by layer id; pool/add/concat layers carry no parameters.
    pub params: BTreeMap<String, LayerParams>,
}

/// Fan-in scaled uniform draw: `U(−√(6/fan_in), +√(6/fan_in))`.
fn init_uniform(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Builds a model with freshly initialized parameters. Kernels and the
/// classifier weight are fan-in scaled uniform; `gamma`/`sigma` start at 1,
/// `beta`/`mu` at 0. Draws happen in topological layer order, so a seed
/// pins every tensor bit-for-bit.
pub fn build_model(spec: &NetworkSpec, seed: u64) -> Result<Model> {
    let shapes = spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = BTreeMap::new();

    for layer in &spec.layers {
        let in_shape = |idx: usize| -> [usize; 3] {
            let src = &layer.inputs[idx];
            if src == INPUT_NAME {
                spec.input
            } else {
                shapes[src]
            }
        };
        match layer.kind {
            LayerKind::Conv {
                filters,
                kernel: [u, v],
                has_bn,
                ..
            } => {
                let c_in = in_shape(0)[2];
                let kernel = init_uniform(&[u, v, c_in, filters], u * v * c_in, &mut rng);
                params.insert(
                    layer.id.clone(),
                    LayerParams::Conv {
                        kernel,
                        gamma: Tensor::full([filters], 1.0),
                        beta: Tensor::zeros([filters]),
                        mu: Tensor::zeros([filters]),
                        sigma: Tensor::full([filters], 1.0),
                        has_bn,
                    },
                );
            }
            LayerKind::Bn { .. } => {
                let c = in_shape(0)[2];
                params.insert(
                    layer.id.clone(),
                    LayerParams::Bn {
                        gamma: Tensor::full([c], 1.0),
                        beta: Tensor::zeros([c]),
                        mu: Tensor::zeros([c]),
                        sigma: Tensor::full([c], 1.0),
                    },
                );
            }
            LayerKind::Linear { units } => {
                let [h, w, c] = in_shape(0);
                let d_in = h * w * c;
                params.insert(
                    layer.id.clone(),
                    LayerParams::Linear {
                        weight: init_uniform(&[d_in, units], d_in, &mut rng),
                        bias: Tensor::zeros([units]),
                    },
                );
            }
            LayerKind::Pool { .. } | LayerKind::Add { .. } | LayerKind::Concat => {}
        }
    }

    Ok(Model {
        spec: spec.clone(),
        params,
    })
}

impl Model {
    pub fn conv(&self, id: &str) -> Result<(&Tensor, &Tensor, &Tensor, &Tensor, &Tensor, bool)> {
        match self.params.get(id) {
            Some(LayerParams::Conv {
                kernel,
                gamma,
                beta,
                mu,
                sigma,
                has_bn,
            }) => Ok((kernel, gamma, beta, mu, sigma, *has_bn)),
            _ => Err(Error::InvalidArgument(format!(
                "layer {id:?} is not a convolution"
            ))),
        }
    }

    /// Forward pass with running statistics; returns logits `[n, classes]`.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        let mut outputs: BTreeMap<&str, Tensor> = BTreeMap::new();
        let mut last = None;
        for layer in &self.spec.layers {
            let input = |idx: usize| -> Tensor {
                let src: &str = &layer.inputs[idx];
                if src == INPUT_NAME {
                    x.clone()
                } else {
                    outputs[src].clone()
                }
            };
            let out = match &layer.kind {
                LayerKind::Conv {
                    stride,
                    padding,
                    relu,
                    ..
                } => {
                    let (kernel, gamma, beta, mu, sigma, _) = self.conv(&layer.id)?;
                    let y = ops::conv2d(&input(0), kernel, *stride, *padding)?;
                    let y = ops::batchnorm_eval(&y, mu, sigma, gamma, beta)?;
                    if *relu {
                        ops::relu(&y)
                    } else {
                        y
                    }
                }
                LayerKind::Bn { relu } => {
                    let Some(LayerParams::Bn {
                        gamma,
                        beta,
                        mu,
                        sigma,
                    }) = self.params.get(&layer.id)
                    else {
                        return Err(Error::InvalidArgument(format!(
                            "missing bn parameters for {:?}",
                            layer.id
                        )));
                    };
                    let y = ops::batchnorm_eval(&input(0), mu, sigma, gamma, beta)?;
                    if *relu {
                        ops::relu(&y)
                    } else {
                        y
                    }
                }
                LayerKind::Pool { op, kernel, stride } => match op {
                    PoolOp::Avg => ops::avgpool2d(&input(0), *kernel, *stride)?,
                    PoolOp::Max => ops::maxpool2d(&input(0), *kernel, *stride)?,
                    PoolOp::GlobalAvg => ops::global_avgpool(&input(0))?,
                },
                LayerKind::Add { relu } => {
                    let y = ops::add(&input(0), &input(1))?;
                    if *relu {
                        ops::relu(&y)
                    } else {
                        y
                    }
                }
                LayerKind::Concat => {
                    let parts: Vec<Tensor> = (0..layer.inputs.len()).map(input).collect();
                    ops::concat_channels(&parts)?
                }
                LayerKind::Linear { .. } => {
                    let Some(LayerParams::Linear { weight, bias }) = self.params.get(&layer.id)
                    else {
                        return Err(Error::InvalidArgument(format!(
                            "missing linear parameters for {:?}",
                            layer.id
                        )));
                    };
                    ops::linear(&input(0), weight, bias)?
                }
            };
            last = Some(out.clone());
            outputs.insert(&layer.id, out);
        }
        last.ok_or_else(|| Error::InvalidSpec("network has no layers".into()))
    }

    /// Forward pass on a gradient tape using batch statistics for
    /// normalization; running statistics are EMA-updated in place with
    /// `momentum` (1.0 replaces them with the batch statistics outright).
    pub fn forward_train(
        &mut self,
        tape: &mut GradTape,
        x: &Tensor,
        momentum: f32,
    ) -> Result<Tensor> {
        let mut outputs: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut last = None;
        // Running-stat updates are applied after the walk so the borrow of
        // self.params stays shared during it.
        let mut stat_updates: Vec<(String, Tensor, Tensor)> = Vec::new();

        for layer in &self.spec.layers {
            let input = |idx: usize| -> Tensor {
                let src: &str = &layer.inputs[idx];
                if src == INPUT_NAME {
                    x.clone()
                } else {
                    outputs[src].clone()
                }
            };
            let out = match &layer.kind {
                LayerKind::Conv {
                    stride,
                    padding,
                    relu,
                    ..
                } => {
                    let (kernel, gamma, beta, mu, sigma, has_bn) = self.conv(&layer.id)?;
                    let y = tape.conv2d(&input(0), kernel, *stride, *padding)?;
                    let y = if has_bn {
                        let (y, stats) = tape.batchnorm(&y, gamma, beta)?;
                        let (mu2, sigma2) = ema_stats(mu, sigma, &stats, momentum);
                        stat_updates.push((layer.id.clone(), mu2, sigma2));
                        y
                    } else {
                        tape.bias_add(&y, beta)?
                    };
                    if *relu {
                        tape.relu(&y)
                    } else {
                        y
                    }
                }
                LayerKind::Bn { relu } => {
                    let Some(LayerParams::Bn {
                        gamma,
                        beta,
                        mu,
                        sigma,
                    }) = self.params.get(&layer.id)
                    else {
                        return Err(Error::InvalidArgument(format!(
                            "missing bn parameters for {:?}",
                            layer.id
                        )));
                    };
                    let (y, stats) = tape.batchnorm(&input(0), gamma, beta)?;
                    let (mu2, sigma2) = ema_stats(mu, sigma, &stats, momentum);
                    stat_updates.push((layer.id.clone(), mu2, sigma2));
                    if *relu {
                        tape.relu(&y)
                    } else {
                        y
                    }
                }
                LayerKind::Pool { op, kernel, stride } => match op {
                    PoolOp::Avg => tape.avgpool2d(&input(0), *kernel, *stride)?,
                    PoolOp::Max => tape.maxpool2d(&input(0), *kernel, *stride)?,
                    PoolOp::GlobalAvg => tape.global_avgpool(&input(0))?,
                },
                LayerKind::Add { relu } => {
                    let y = tape.add(&input(0), &input(1))?;
                    if *relu {
                        tape.relu(&y)
                    } else {
                        y
                    }
                }
                LayerKind::Concat => {
                    let parts: Vec<Tensor> = (0..layer.inputs.len()).map(input).collect();
                    tape.concat_channels(&parts)?
                }
                LayerKind::Linear { .. } => {
                    let Some(LayerParams::Linear { weight, bias }) = self.params.get(&layer.id)
                    else {
                        return Err(Error::InvalidArgument(format!(
                            "missing linear parameters for {:?}",
                            layer.id
                        )));
                    };
                    tape.linear(&input(0), weight, bias)?
                }
            };
            last = Some(out.clone());
            outputs.insert(layer.id.clone(), out);
        }

        for (id, mu2, sigma2) in stat_updates {
            match self.params.get_mut(&id) {
                Some(LayerParams::Conv { mu, sigma, .. })
                | Some(LayerParams::Bn { mu, sigma, .. }) => {
                    *mu = mu2;
                    *sigma = sigma2;
                }
                _ => unreachable!("stat update for non-normalized layer"),
            }
        }
        last.ok_or_else(|| Error::InvalidSpec("network has no layers".into()))
    }

    /// Mean classification accuracy of `forward_eval` logits.
    pub fn accuracy(&self, images: &Tensor, labels: &[usize], batch: usize) -> Result<f32> {
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::InvalidArgument(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        let [_, h, w, c] = images.dims4("images")?;
        let mut correct = 0usize;
        let mut start = 0;
        while start < n {
            let end = (start + batch.max(1)).min(n);
            let count = end - start;
            let slice: Vec<f32> =
                images.data()[start * h * w * c..end * h * w * c].to_vec();
            let xb = Tensor::new([count, h, w, c], slice)?;
            let logits = self.forward_eval(&xb)?;
            let classes = logits.shape()[logits.ndim() - 1];
            for i in 0..count {
                let row = &logits.data()[i * classes..(i + 1) * classes];
                let pred = row
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(j, _)| j)
                    .unwrap();
                if pred == labels[start + i] {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(correct as f32 / n as f32)
    }

    /// Canonical (name, tensor) list in layer order, used by checkpoints.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for layer in &self.spec.layers {
            match self.params.get(&layer.id) {
                Some(LayerParams::Conv {
                    kernel,
                    gamma,
                    beta,
                    mu,
                    sigma,
                    ..
                }) => {
                    for (suffix, t) in [
                        ("kernel", kernel),
                        ("gamma", gamma),
                        ("beta", beta),
                        ("mu", mu),
                        ("sigma", sigma),
                    ] {
                        out.push((format!("layers.{}.{}", layer.id, suffix), t.clone()));
                    }
                }
                Some(LayerParams::Bn {
                    gamma,
                    beta,
                    mu,
                    sigma,
                }) => {
                    for (suffix, t) in [
                        ("gamma", gamma),
                        ("beta", beta),
                        ("mu", mu),
                        ("sigma", sigma),
                    ] {
                        out.push((format!("layers.{}.{}", layer.id, suffix), t.clone()));
                    }
                }
                Some(LayerParams::Linear { weight, bias }) => {
                    out.push((format!("layers.{}.weight", layer.id), weight.clone()));
                    out.push((format!("layers.{}.bias", layer.id), bias.clone()));
                }
                None => {}
            }
        }
        out
    }

    /// Mutable access to every named tensor, for checkpoint restore.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (id, params) in self.params.iter_mut() {
            match params {
                LayerParams::Conv {
                    kernel,
                    gamma,
                    beta,
                    mu,
                    sigma,
                    ..
                } => {
                    for (suffix, t) in [
                        ("kernel", kernel),
                        ("gamma", gamma),
                        ("beta", beta),
                        ("mu", mu),
                        ("sigma", sigma),
                    ] {
                        out.push((format!("layers.{id}.{suffix}"), t));
                    }
                }
                LayerParams::Bn {
                    gamma,
                    beta,
                    mu,
                    sigma,
                } => {
                    for (suffix, t) in
                        [("gamma", gamma), ("beta", beta), ("mu", mu), ("sigma", sigma)]
                    {
                        out.push((format!("layers.{id}.{suffix}"), t));
                    }
                }
                LayerParams::Linear { weight, bias } => {
                    out.push((format!("layers.{id}.weight"), weight));
                    out.push((format!("layers.{id}.bias"), bias));
                }
            }
        }
        out
    }
}

/// EMA update for running statistics. The stored `sigma` is the stabilized
/// standard deviation √(var + ε), so it is de-stabilized before averaging
/// variances and re-stabilized after.
fn ema_stats(
    mu: &Tensor,
    sigma: &Tensor,
    stats: &ops::BnBatchStats,
    momentum: f32,
) -> (Tensor, Tensor) {
    let m = momentum;
    let mu2: Vec<f32> = mu
        .data()
        .iter()
        .zip(&stats.mean)
        .map(|(old, new)| (1.0 - m) * old + m * new)
        .collect();
    let sigma2: Vec<f32> = sigma
        .data()
        .iter()
        .zip(&stats.var)
        .map(|(old, new)| {
            let var_old = (old * old - BN_STABILIZER).max(0.0);
            ((1.0 - m) * var_old + m * new + BN_STABILIZER).sqrt()
        })
        .collect();
    (
        Tensor::new(mu.shape(), mu2).unwrap(),
        Tensor::new(sigma.shape(), sigma2).unwrap(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstraintKind {
    Residual,
    Dense,
}

/// A channel slice of a standalone `bn` layer governed by a pacesetter
/// convolution, or a whole follower convolution in a residual group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Follower {
    Conv(String),
    BnSlice { layer: String, offset: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintGroup {
    pub kind: ConstraintKind,
    pub pacesetter: String,
    pub followers: Vec<Follower>,
}

/// Derives the structural constraint groups of a network. See the module
/// docs for the two couplings. Groups are returned in topological order of
/// their pacesetters.
pub fn derive_constraint_groups(spec: &NetworkSpec) -> Result<Vec<ConstraintGroup>> {
    spec.validate()?;
    let mut groups = residual_groups(spec);
    groups.extend(dense_groups(spec)?);
    Ok(groups)
}

/// Convolutions whose outputs occupy the same channel space, connected by
/// add nodes. Propagation: a conv aliases itself; bn and pool layers pass
/// their input's aliases through; an add unions both sides; concat and
/// linear terminate (their outputs are new channel spaces).
fn residual_groups(spec: &NetworkSpec) -> Vec<ConstraintGroup> {
    fn of<'a>(src: &str, alias: &BTreeMap<&'a str, Vec<&'a str>>) -> Vec<&'a str> {
        if src == INPUT_NAME {
            Vec::new()
        } else {
            alias.get(src).cloned().unwrap_or_default()
        }
    }

    let mut alias: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    let mut merged: Vec<Vec<&str>> = Vec::new();

    for layer in &spec.layers {
        let set: Vec<&str> = match &layer.kind {
            LayerKind::Conv { .. } => vec![layer.id.as_str()],
            LayerKind::Bn { .. } | LayerKind::Pool { .. } => of(&layer.inputs[0], &alias),
            LayerKind::Add { .. } => {
                let mut s = of(&layer.inputs[0], &alias);
                for id in of(&layer.inputs[1], &alias) {
                    if !s.contains(&id) {
                        s.push(id);
                    }
                }
                // Record the union; overlapping unions merge below.
                if s.len() >= 2 {
                    if let Some(existing) = merged
                        .iter_mut()
                        .find(|g| g.iter().any(|id| s.contains(id)))
                    {
                        for id in &s {
                            if !existing.contains(id) {
                                existing.push(id);
                            }
                        }
                    } else {
                        merged.push(s.clone());
                    }
                }
                s
            }
            LayerKind::Concat | LayerKind::Linear { .. } => Vec::new(),
        };
        alias.insert(&layer.id, set);
    }

    // Transitive closure over the recorded unions.
    loop {
        let mut changed = false;
        'outer: for i in 0..merged.len() {
            for j in i + 1..merged.len() {
                if merged[i].iter().any(|id| merged[j].contains(id)) {
                    let extra = merged.remove(j);
                    for id in extra {
                        if !merged[i].contains(&id) {
                            merged[i].push(id);
                        }
                    }
                    changed = true;
                    break 'outer;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let topo_index = |id: &str| spec.layers.iter().position(|l| l.id == id).unwrap();
    let mut groups = Vec::new();
    for mut members in merged {
        members.sort_by_key(|id| topo_index(id));
        let projections: Vec<&&str> = members
            .iter()
            .filter(|id| {
                matches!(
                    spec.layer(id).unwrap().kind,
                    LayerKind::Conv {
                        kernel: [1, 1],
                        ..
                    }
                )
            })
            .collect();
        let pacesetter = if projections.len() == 1 {
            projections[0].to_string()
        } else {
            members[0].to_string()
        };
        let followers = members
            .iter()
            .filter(|id| **id != pacesetter)
            .map(|id| Follower::Conv(id.to_string()))
            .collect();
        groups.push(ConstraintGroup {
            kind: ConstraintKind::Residual,
            pacesetter,
            followers,
        });
    }
    groups.sort_by_key(|g| topo_index(&g.pacesetter));
    groups
}

/// Channel segments of a layer output: (owning conv id, width) in channel
/// order. `None` when some channels cannot be traced to a single conv.
fn channel_segments<'a>(
    spec: &'a NetworkSpec,
    cache: &mut BTreeMap<&'a str, Option<Vec<(&'a str, usize)>>>,
    id: &'a str,
) -> Option<Vec<(&'a str, usize)>> {
    if id == INPUT_NAME {
        return None;
    }
    if let Some(hit) = cache.get(id) {
        return hit.clone();
    }
    let layer = spec.layer(id).unwrap();
    let result = match &layer.kind {
        LayerKind::Conv { filters, .. } => Some(vec![(id, *filters)]),
        LayerKind::Bn { .. } | LayerKind::Pool { .. } => {
            channel_segments(spec, cache, &layer.inputs[0])
        }
        LayerKind::Concat => {
            let mut segs = Vec::new();
            for src in &layer.inputs {
                segs.extend(channel_segments(spec, cache, src)?);
            }
            Some(segs)
        }
        // Added channels belong to several convs at once; no single owner.
        LayerKind::Add { .. } | LayerKind::Linear { .. } => None,
    };
    cache.insert(id, result.clone());
    result
}

/// For every convolution normalized by standalone `bn` layers, a group
/// listing the (bn, offset) slices its channels occupy.
fn dense_groups(spec: &NetworkSpec) -> Result<Vec<ConstraintGroup>> {
    let mut cache = BTreeMap::new();
    let mut by_conv: BTreeMap<&str, Vec<Follower>> = BTreeMap::new();

    for layer in &spec.layers {
        if !matches!(layer.kind, LayerKind::Bn { .. }) {
            continue;
        }
        let segs = channel_segments(spec, &mut cache, &layer.inputs[0])
            .ok_or_else(|| {
                Error::ConstraintViolation(format!(
                    "bn layer {:?} normalizes channels that cannot be traced to owning convolutions",
                    layer.id
                ))
            })?;
        let mut offset = 0;
        for (conv, width) in segs {
            by_conv.entry(conv).or_default().push(Follower::BnSlice {
                layer: layer.id.clone(),
                offset,
            });
            offset += width;
        }
    }

    let topo_index = |id: &str| spec.layers.iter().position(|l| l.id == id).unwrap();
    let mut groups: Vec<ConstraintGroup> = by_conv
        .into_iter()
        .map(|(conv, followers)| ConstraintGroup {
            kind: ConstraintKind::Dense,
            pacesetter: conv.to_string(),
            followers,
        })
        .collect();
    groups.sort_by_key(|g| topo_index(&g.pacesetter));
    Ok(groups)
}
