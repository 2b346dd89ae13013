//! Network architecture descriptions.
//!
//! A [`NetworkSpec`] is a small DAG of typed layers, serialized as JSON in
//! checkpoints and built programmatically by the stock topology factories.
//! Layers are stored in topological order: every input must name `"data"`
//! or an earlier layer, which rules out cycles by construction. Validation
//! runs full shape inference and returns the output shape of every layer,
//! so downstream code (parameter init, forward passes, trimming) can assume
//! a well-formed graph.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv_out_dim;

/// The reserved input name referenced by first-layer `inputs`.
pub const INPUT_NAME: &str = "data";

/// A complete network: input image shape `[h, w, c]`, class count, and the
/// layer DAG in topological order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// One node of the DAG. `kind` is flattened into the same JSON object under
/// a `"kind"` tag, so a layer serializes as
/// `{"id": "c1", "kind": "conv", "filters": 8, ..., "inputs": ["data"]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub id: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<String>,
}

fn default_stride() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    /// Convolution, optionally with fused batch normalization and relu.
    /// Without `has_bn` the per-channel shift is a plain bias.
    Conv {
        filters: usize,
        kernel: [usize; 2],
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default = "default_true")]
        has_bn: bool,
        #[serde(default = "default_true")]
        relu: bool,
    },
    /// Standalone batch normalization (used by densely connected nets where
    /// one normalization consumes the concatenation of many convolutions).
    Bn {
        #[serde(default = "default_true")]
        relu: bool,
    },
    Pool {
        op: PoolOp,
        #[serde(default)]
        kernel: usize,
        #[serde(default)]
        stride: usize,
    },
    /// Elementwise sum of exactly two inputs with identical shapes.
    Add {
        #[serde(default = "default_true")]
        relu: bool,
    },
    /// Channel-axis concatenation of two or more inputs.
    Concat,
    /// Fully connected layer; must be the unique sink of the graph.
    Linear { units: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolOp {
    Avg,
    Max,
    GlobalAvg,
}

/// FLOP and parameter totals from [`NetworkSpec::cost`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkCost {
    pub flops: u64,
    pub params: u64,
}

impl NetworkSpec {
    /// Validates the graph and infers every layer's output shape `[h, w, c]`
    /// (a linear layer reports `[1, 1, units]`).
    ///
    /// Checks: unique non-reserved ids, inputs referencing `"data"` or
    /// earlier layers only, arity per kind, shape agreement for `add`,
    /// spatial agreement for `concat`, integral conv/pool output sizes, and
    /// a unique sink which must be the linear classifier with `units ==
    /// classes`.
    pub fn validate(&self) -> Result<BTreeMap<String, [usize; 3]>> {
        if self.input.contains(&0) {
            return Err(Error::InvalidSpec(format!(
                "input shape {:?} has a zero dimension",
                self.input
            )));
        }
        if self.classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidSpec("network has no layers".into()));
        }

        let mut shapes: BTreeMap<String, [usize; 3]> = BTreeMap::new();
        let mut consumed: HashSet<&str> = HashSet::new();

        for layer in &self.layers {
            if layer.id.is_empty() || layer.id == INPUT_NAME {
                return Err(Error::InvalidSpec(format!(
                    "layer id {:?} is empty or reserved",
                    layer.id
                )));
            }
            if shapes.contains_key(&layer.id) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate layer id {:?}",
                    layer.id
                )));
            }

            let mut in_shapes = Vec::with_capacity(layer.inputs.len());
            for src in &layer.inputs {
                let shape = if src == INPUT_NAME {
                    self.input
                } else {
                    *shapes.get(src).ok_or_else(|| {
                        Error::InvalidSpec(format!(
                            "layer {:?} references {:?}, which is not the input or an earlier layer",
                            layer.id, src
                        ))
                    })?
                };
                consumed.insert(src.as_str());
                in_shapes.push(shape);
            }

            let out = infer_shape(layer, &in_shapes)?;
            shapes.insert(layer.id.clone(), out);
        }

        let sinks: Vec<&LayerSpec> = self
            .layers
            .iter()
            .filter(|l| !consumed.contains(l.id.as_str()))
            .collect();
        if sinks.len() != 1 {
            return Err(Error::InvalidSpec(format!(
                "expected exactly one sink layer, found {:?}",
                sinks.iter().map(|l| l.id.as_str()).collect::<Vec<_>>()
            )));
        }
        match sinks[0].kind {
            LayerKind::Linear { units } if units == self.classes => {}
            LayerKind::Linear { units } => {
                return Err(Error::InvalidSpec(format!(
                    "classifier {:?} has {} units but the network declares {} classes",
                    sinks[0].id, units, self.classes
                )));
            }
            _ => {
                return Err(Error::InvalidSpec(format!(
                    "sink layer {:?} must be linear",
                    sinks[0].id
                )));
            }
        }
        let linear_count = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Linear { .. }))
            .count();
        if linear_count != 1 {
            return Err(Error::InvalidSpec(format!(
                "expected exactly one linear layer, found {linear_count}"
            )));
        }

        Ok(shapes)
    }

    /// Multiply–add count (×2) for convolutions and the classifier, plus
    /// total learnable parameter count.
    pub fn cost(&self) -> Result<NetworkCost> {
        let shapes = self.validate()?;
        let mut flops: u64 = 0;
        let mut params: u64 = 0;
        for layer in &self.layers {
            let in_c = |idx: usize| -> u64 {
                let src = &layer.inputs[idx];
                if src == INPUT_NAME {
                    self.input[2] as u64
                } else {
                    shapes[src][2] as u64
                }
            };
            match layer.kind {
                LayerKind::Conv {
                    filters,
                    kernel: [u, v],
                    ..
                } => {
                    let [ho, wo, c_out] = shapes[&layer.id];
                    flops += 2
                        * ho as u64
                        * wo as u64
                        * u as u64
                        * v as u64
                        * in_c(0)
                        * c_out as u64;
                    params += u as u64 * v as u64 * in_c(0) * filters as u64
                        + 2 * filters as u64;
                }
                LayerKind::Bn { .. } => params += 2 * in_c(0),
                LayerKind::Linear { units } => {
                    let d_in = {
                        let src = &layer.inputs[0];
                        let [h, w, c] = if src == INPUT_NAME {
                            self.input
                        } else {
                            shapes[src]
                        };
                        (h * w * c) as u64
                    };
                    flops += 2 * d_in * units as u64;
                    params += d_in * units as u64 + units as u64;
                }
                LayerKind::Pool { .. } | LayerKind::Add { .. } | LayerKind::Concat => {}
            }
        }
        Ok(NetworkCost { flops, params })
    }

    pub fn layer(&self, id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.id == id)
    }

    /// Convolution layer ids in topological order with their filter counts.
    pub fn conv_widths(&self) -> Vec<(String, usize)> {
        self.layers
            .iter()
            .filter_map(|l| match l.kind {
                LayerKind::Conv { filters, .. } => Some((l.id.clone(), filters)),
                _ => None,
            })
            .collect()
    }
}

fn infer_shape(layer: &LayerSpec, inputs: &[[usize; 3]]) -> Result<[usize; 3]> {
    let expect_arity = |n: usize| -> Result<()> {
        if inputs.len() == n {
            Ok(())
        } else {
            Err(Error::InvalidSpec(format!(
                "layer {:?} expects {} input(s), got {}",
                layer.id,
                n,
                inputs.len()
            )))
        }
    };
    match layer.kind {
        LayerKind::Conv {
            filters,
            kernel: [u, v],
            stride,
            padding,
            ..
        } => {
            expect_arity(1)?;
            if filters == 0 {
                return Err(Error::InvalidSpec(format!(
                    "conv {:?} has zero filters",
                    layer.id
                )));
            }
            let [h, w, _] = inputs[0];
            let ho = conv_out_dim(h, u, stride, padding).map_err(|e| {
                Error::InvalidSpec(format!("conv {:?} height: {e}", layer.id))
            })?;
            let wo = conv_out_dim(w, v, stride, padding).map_err(|e| {
                Error::InvalidSpec(format!("conv {:?} width: {e}", layer.id))
            })?;
            Ok([ho, wo, filters])
        }
        LayerKind::Bn { .. } => {
            expect_arity(1)?;
            Ok(inputs[0])
        }
        LayerKind::Pool { op, kernel, stride } => {
            expect_arity(1)?;
            let [h, w, c] = inputs[0];
            match op {
                PoolOp::GlobalAvg => Ok([1, 1, c]),
                PoolOp::Avg | PoolOp::Max => {
                    let ho = conv_out_dim(h, kernel, stride, 0).map_err(|e| {
                        Error::InvalidSpec(format!("pool {:?} height: {e}", layer.id))
                    })?;
                    let wo = conv_out_dim(w, kernel, stride, 0).map_err(|e| {
                        Error::InvalidSpec(format!("pool {:?} width: {e}", layer.id))
                    })?;
                    Ok([ho, wo, c])
                }
            }
        }
        LayerKind::Add { .. } => {
            expect_arity(2)?;
            if inputs[0] != inputs[1] {
                return Err(Error::InvalidSpec(format!(
                    "add {:?} inputs have different shapes {:?} and {:?}",
                    layer.id, inputs[0], inputs[1]
                )));
            }
            Ok(inputs[0])
        }
        LayerKind::Concat => {
            if inputs.len() < 2 {
                return Err(Error::InvalidSpec(format!(
                    "concat {:?} needs at least two inputs",
                    layer.id
                )));
            }
            let [h, w, _] = inputs[0];
            let mut c = 0;
            for s in inputs {
                if s[0] != h || s[1] != w {
                    return Err(Error::InvalidSpec(format!(
                        "concat {:?} inputs disagree on spatial size: {:?} vs {:?}",
                        layer.id, inputs[0], s
                    )));
                }
                c += s[2];
            }
            Ok([h, w, c])
        }
        LayerKind::Linear { units } => {
            expect_arity(1)?;
            if units == 0 {
                return Err(Error::InvalidSpec(format!(
                    "linear {:?} has zero units",
                    layer.id
                )));
            }
            Ok([1, 1, units])
        }
    }
}

fn conv(id: &str, filters: usize, kernel: [usize; 2], stride: usize, padding: usize, input: &str) -> LayerSpec {
    LayerSpec {
        id: id.into(),
        kind: LayerKind::Conv {
            filters,
            kernel,
            stride,
            padding,
            has_bn: true,
            relu: true,
        },
        inputs: vec![input.into()],
    }
}

/// Plain convolutional stack: per stage, 3×3 same-padding convolutions at
/// the stage width, 2×2 max pooling between stages, then global average
/// pooling and the classifier.
pub fn toy_vgg(input: [usize; 3], classes: usize, stages: &[Vec<usize>]) -> NetworkSpec {
    let mut layers = Vec::new();
    let mut prev = INPUT_NAME.to_string();
    for (si, widths) in stages.iter().enumerate() {
        for (ci, &w) in widths.iter().enumerate() {
            let id = format!("s{si}c{ci}");
            layers.push(conv(&id, w, [3, 3], 1, 1, &prev));
            prev = id;
        }
        if si + 1 < stages.len() {
            let id = format!("s{si}pool");
            layers.push(LayerSpec {
                id: id.clone(),
                kind: LayerKind::Pool {
                    op: PoolOp::Max,
                    kernel: 2,
                    stride: 2,
                },
                inputs: vec![prev],
            });
            prev = id;
        }
    }
    layers.push(LayerSpec {
        id: "gap".into(),
        kind: LayerKind::Pool {
            op: PoolOp::GlobalAvg,
            kernel: 0,
            stride: 0,
        },
        inputs: vec![prev],
    });
    layers.push(LayerSpec {
        id: "fc".into(),
        kind: LayerKind::Linear { units: classes },
        inputs: vec!["gap".into()],
    });
    NetworkSpec {
        input,
        classes,
        layers,
    }
}

/// Residual network with three stages of basic blocks.
///
/// `widths[i] = [internal, output]`: each block is conv1 (3×3, `internal`
/// filters, bn, relu) → conv2 (3×3, `output` filters, bn, no relu) → add
/// with the shortcut → relu. Stage 0 adds onto the stem directly; stages 1
/// and 2 open with a 2×2 average pool (output dims stay integral for
/// even-sized inputs, which strided convolutions cannot guarantee) followed
/// by a 1×1 projection on the shortcut. Blocks after the first use identity
/// shortcuts, so every add in a stage aliases the same channel space — the
/// structure the residual constraint group machinery has to honor.
pub fn toy_resnet(
    input: [usize; 3],
    classes: usize,
    widths: &[[usize; 2]; 3],
    blocks_per_stage: usize,
) -> NetworkSpec {
    assert!(blocks_per_stage >= 1);
    let mut layers = Vec::new();
    layers.push(conv("stem", widths[0][1], [3, 3], 1, 1, INPUT_NAME));
    let mut prev = "stem".to_string();
    for (si, &[c_mid, c_out]) in widths.iter().enumerate() {
        if si > 0 {
            let down = format!("s{si}down");
            layers.push(LayerSpec {
                id: down.clone(),
                kind: LayerKind::Pool {
                    op: PoolOp::Avg,
                    kernel: 2,
                    stride: 2,
                },
                inputs: vec![prev],
            });
            prev = down;
        }
        for bi in 0..blocks_per_stage {
            let reproject = si > 0 && bi == 0;
            let shortcut = if reproject {
                let id = format!("s{si}proj");
                layers.push(LayerSpec {
                    id: id.clone(),
                    kind: LayerKind::Conv {
                        filters: c_out,
                        kernel: [1, 1],
                        stride: 1,
                        padding: 0,
                        has_bn: true,
                        relu: false,
                    },
                    inputs: vec![prev.clone()],
                });
                id
            } else {
                prev.clone()
            };
            let c1 = format!("s{si}b{bi}c1");
            layers.push(LayerSpec {
                id: c1.clone(),
                kind: LayerKind::Conv {
                    filters: c_mid,
                    kernel: [3, 3],
                    stride: 1,
                    padding: 1,
                    has_bn: true,
                    relu: true,
                },
                inputs: vec![prev.clone()],
            });
            let c2 = format!("s{si}b{bi}c2");
            layers.push(LayerSpec {
                id: c2.clone(),
                kind: LayerKind::Conv {
                    filters: c_out,
                    kernel: [3, 3],
                    stride: 1,
                    padding: 1,
                    has_bn: true,
                    relu: false,
                },
                inputs: vec![c1],
            });
            let add = format!("s{si}b{bi}add");
            layers.push(LayerSpec {
                id: add.clone(),
                kind: LayerKind::Add { relu: true },
                inputs: vec![shortcut, c2],
            });
            prev = add;
        }
    }
    layers.push(LayerSpec {
        id: "gap".into(),
        kind: LayerKind::Pool {
            op: PoolOp::GlobalAvg,
            kernel: 0,
            stride: 0,
        },
        inputs: vec![prev],
    });
    layers.push(LayerSpec {
        id: "fc".into(),
        kind: LayerKind::Linear { units: classes },
        inputs: vec!["gap".into()],
    });
    NetworkSpec {
        input,
        classes,
        layers,
    }
}

/// Densely connected network with pre-activation layers.
///
/// The stem and every dense convolution run *without* fused normalization;
/// instead each dense layer starts with a standalone `bn` over the running
/// concatenation, so one convolution's output channels are normalized by
/// several later `bn` layers at fixed offsets — the structure the dense
/// constraint group machinery has to honor.
pub fn toy_densenet(
    input: [usize; 3],
    classes: usize,
    stem_width: usize,
    growth: usize,
    dense_layers: usize,
) -> NetworkSpec {
    assert!(dense_layers >= 1);
    let mut layers = Vec::new();
    layers.push(LayerSpec {
        id: "stem".into(),
        kind: LayerKind::Conv {
            filters: stem_width,
            kernel: [3, 3],
            stride: 1,
            padding: 1,
            has_bn: false,
            relu: false,
        },
        inputs: vec![INPUT_NAME.into()],
    });
    let mut cat = "stem".to_string();
    for li in 0..dense_layers {
        let bn = format!("d{li}bn");
        layers.push(LayerSpec {
            id: bn.clone(),
            kind: LayerKind::Bn { relu: true },
            inputs: vec![cat.clone()],
        });
        let c = format!("d{li}conv");
        layers.push(LayerSpec {
            id: c.clone(),
            kind: LayerKind::Conv {
                filters: growth,
                kernel: [3, 3],
                stride: 1,
                padding: 1,
                has_bn: false,
                relu: false,
            },
            inputs: vec![bn],
        });
        let next = format!("d{li}cat");
        layers.push(LayerSpec {
            id: next.clone(),
            kind: LayerKind::Concat,
            inputs: vec![cat, c],
        });
        cat = next;
    }
    layers.push(LayerSpec {
        id: "final_bn".into(),
        kind: LayerKind::Bn { relu: true },
        inputs: vec![cat],
    });
    layers.push(LayerSpec {
        id: "gap".into(),
        kind: LayerKind::Pool {
            op: PoolOp::GlobalAvg,
            kernel: 0,
            stride: 0,
        },
        inputs: vec!["final_bn".into()],
    });
    layers.push(LayerSpec {
        id: "fc".into(),
        kind: LayerKind::Linear { units: classes },
        inputs: vec!["gap".into()],
    });
    NetworkSpec {
        input,
        classes,
        layers,
    }
}
