//! Reverse-mode automatic differentiation.
//!
//! `GradTape` records every op executed through it, in order. `backward` seeds
//! the scalar loss with gradient 1 and walks the record in reverse, invoking
//! each op's backward rule and accumulating gradients per tensor id. Tensors
//! used at several places in the graph receive the sum of all contributions.

use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::ops::{self, BnBatchStats};
use crate::tensor::Tensor;

enum Node {
    Conv2d {
        x: Tensor,
        kernel: Tensor,
        stride: usize,
        padding: usize,
        out_id: u64,
    },
    BiasAdd {
        x: Tensor,
        bias: Tensor,
        out_id: u64,
    },
    Relu {
        x: Tensor,
        out_id: u64,
    },
    Add {
        a: Tensor,
        b: Tensor,
        out_id: u64,
    },
    Mul {
        a: Tensor,
        b: Tensor,
        out_id: u64,
    },
    Scale {
        x: Tensor,
        factor: f32,
        out_id: u64,
    },
    SumAll {
        x: Tensor,
        out_id: u64,
    },
    Concat {
        parts: Vec<Tensor>,
        out_id: u64,
    },
    AvgPool {
        x: Tensor,
        window: usize,
        stride: usize,
        out_id: u64,
    },
    MaxPool {
        x: Tensor,
        window: usize,
        stride: usize,
        out_id: u64,
    },
    GlobalAvgPool {
        x: Tensor,
        out_id: u64,
    },
    Linear {
        x: Tensor,
        weight: Tensor,
        bias: Tensor,
        out_id: u64,
    },
    BatchNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        stats: BnBatchStats,
        out_id: u64,
    },
    SoftmaxXent {
        probs: Tensor,
        labels: Vec<usize>,
        logits_id: u64,
        out_id: u64,
    },
}

#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
    seen: HashSet<u64>,
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
    }

    fn track(&mut self, tensors: &[&Tensor]) {
        for t in tensors {
            self.seen.insert(t.id());
        }
    }

    pub fn conv2d(
        &mut self,
        x: &Tensor,
        kernel: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let out = ops::conv2d(x, kernel, stride, padding)?;
        self.track(&[x, kernel, &out]);
        self.nodes.push(Node::Conv2d {
            x: x.clone(),
            kernel: kernel.clone(),
            stride,
            padding,
            out_id: out.id(),
        });
        Ok(out)
    }

    pub fn bias_add(&mut self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let out = ops::bias_add(x, bias)?;
        self.track(&[x, bias, &out]);
        self.nodes.push(Node::BiasAdd {
            x: x.clone(),
            bias: bias.clone(),
            out_id: out.id(),
        });
        Ok(out)
    }

    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let out = ops::relu(x);
        self.track(&[x, &out]);
        self.nodes.push(Node::Relu {
            x: x.clone(),
            out_id: out.id(),
        });
        out
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::add(a, b)?;
        self.track(&[a, b, &out]);
        self.nodes.push(Node::Add {
            a: a.clone(),
            b: b.clone(),
            out_id: out.id(),
        });
        Ok(out)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = ops::mul(a, b)?;
        self.track(&[a, b, &out]);
        self.nodes.push(Node::Mul {
            a: a.clone(),
            b: b.clone(),
            out_id: out.id(),
        });
        Ok(out)
    }

    pub fn scale(&mut self, x: &Tensor, factor: f32) -> Tensor {
        let out = ops::scale(x, factor);
        self.track(&[x, &out]);
        self.nodes.push(Node::Scale {
            x: x.clone(),
            factor,
            out_id: out.id(),
        });
        out
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let out = ops::sum_all(x);
        self.track(&[x, &out]);
        self.nodes.push(Node::SumAll {
            x: x.clone(),
            out_id: out.id(),
        });
        out
    }

    pub fn concat_channels(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        let out = ops::concat_channels(parts)?;
        for p in parts {
            self.track(&[p]);
        }
        self.track(&[&out]);
        self.nodes.push(Node::Concat {
            parts: parts.to_vec(),
            out_id: out.id(),
        });
        Ok(out)
    }

    pub fn avgpool2d(&mut self, x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
        let out = ops::avgpool2d(x, window, stride)?;
        self.track(&[x, &out]);
        self.nodes.push(Node::AvgPool {
            x: x.clone(),
            window,
            stride,
            out_id: out.id(),
        });
        Ok(out)
    }

    pub fn maxpool2d(&mut self, x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
        let out = ops::maxpool2d(x, window, stride)?;
        self.track(&[x, &out]);
        self.nodes.push(Node::MaxPool {
            x: x.clone(),
            window,
            stride,
            out_id: out.id(),
        });
        Ok(out)
    }

    pub fn global_avgpool(&mut self, x: &Tensor) -> Result<Tensor> {
        let out = ops::global_avgpool(x)?;
        self.track(&[x, &out]);
        self.nodes.push(Node::GlobalAvgPool {
            x: x.clone(),
            out_id: out.id(),
        });
        Ok(out)
    }

    pub fn linear(&mut self, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let out = ops::linear(x, weight, bias)?;
        self.track(&[x, weight, bias, &out]);
        self.nodes.push(Node::Linear {
            x: x.clone(),
            weight: weight.clone(),
            bias: bias.clone(),
            out_id: out.id(),
        });
        Ok(out)
    }

    /// Train-mode batch norm; returns the output and the batch statistics so
    /// the caller can update running estimates.
    pub fn batchnorm(
        &mut self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
    ) -> Result<(Tensor, BnBatchStats)> {
        let (out, stats) = ops::batchnorm_train(x, gamma, beta)?;
        self.track(&[x, gamma, beta, &out]);
        self.nodes.push(Node::BatchNorm {
            x: x.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            stats: stats.clone(),
            out_id: out.id(),
        });
        Ok((out, stats))
    }

    pub fn softmax_xent(&mut self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (loss, probs) = ops::softmax_xent(logits, labels)?;
        self.track(&[logits, &loss]);
        self.nodes.push(Node::SoftmaxXent {
            probs,
            labels: labels.to_vec(),
            logits_id: logits.id(),
            out_id: loss.id(),
        });
        Ok(loss)
    }

    /// Walk the tape backward from a scalar loss and collect gradients for
    /// every tensor reachable from it.
    pub fn backward(&self, loss: &Tensor) -> Result<GradStore> {
        if loss.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !self.seen.contains(&loss.id()) {
            return Err(Error::NotOnTape(loss.id()));
        }
        let mut grads: HashMap<u64, (Vec<usize>, Vec<f32>)> = HashMap::new();
        grads.insert(loss.id(), (vec![1], vec![1.0]));

        for node in self.nodes.iter().rev() {
            let out_id = match node {
                Node::Conv2d { out_id, .. }
                | Node::BiasAdd { out_id, .. }
                | Node::Relu { out_id, .. }
                | Node::Add { out_id, .. }
                | Node::Mul { out_id, .. }
                | Node::Scale { out_id, .. }
                | Node::SumAll { out_id, .. }
                | Node::Concat { out_id, .. }
                | Node::AvgPool { out_id, .. }
                | Node::MaxPool { out_id, .. }
                | Node::GlobalAvgPool { out_id, .. }
                | Node::Linear { out_id, .. }
                | Node::BatchNorm { out_id, .. }
                | Node::SoftmaxXent { out_id, .. } => *out_id,
            };
            let Some((out_shape, gdata)) = grads.get(&out_id) else {
                continue;
            };
            let gout = Tensor::new(out_shape.clone(), gdata.clone())?;

            match node {
                Node::Conv2d {
                    x,
                    kernel,
                    stride,
                    padding,
                    ..
                } => {
                    let (dx, dk) = ops::conv2d_backward(x, kernel, *stride, *padding, &gout)?;
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, kernel, dk);
                }
                Node::BiasAdd { x, bias, .. } => {
                    let (dx, db) = ops::bias_add_backward(&gout, bias.len());
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, bias, db);
                }
                Node::Relu { x, .. } => {
                    accumulate(&mut grads, x, ops::relu_backward(x, &gout));
                }
                Node::Add { a, b, .. } => {
                    accumulate(&mut grads, a, gout.clone());
                    accumulate(&mut grads, b, gout);
                }
                Node::Mul { a, b, .. } => {
                    accumulate(&mut grads, a, ops::mul(&gout, b)?);
                    accumulate(&mut grads, b, ops::mul(&gout, a)?);
                }
                Node::Scale { x, factor, .. } => {
                    accumulate(&mut grads, x, ops::scale(&gout, *factor));
                }
                Node::SumAll { x, .. } => {
                    let g = gout.item()?;
                    accumulate(&mut grads, x, Tensor::full(x.shape(), g));
                }
                Node::Concat { parts, .. } => {
                    let widths: Vec<usize> =
                        parts.iter().map(|p| p.shape()[3]).collect();
                    for (part, g) in parts
                        .iter()
                        .zip(ops::concat_channels_backward(&gout, &widths))
                    {
                        accumulate(&mut grads, part, g);
                    }
                }
                Node::AvgPool {
                    x, window, stride, ..
                } => {
                    accumulate(
                        &mut grads,
                        x,
                        ops::avgpool2d_backward(x.shape(), *window, *stride, &gout),
                    );
                }
                Node::MaxPool {
                    x, window, stride, ..
                } => {
                    accumulate(
                        &mut grads,
                        x,
                        ops::maxpool2d_backward(x, *window, *stride, &gout),
                    );
                }
                Node::GlobalAvgPool { x, .. } => {
                    accumulate(&mut grads, x, ops::global_avgpool_backward(x.shape(), &gout));
                }
                Node::Linear { x, weight, bias, .. } => {
                    let (dx, dw, db) = ops::linear_backward(x, weight, &gout)?;
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, weight, dw);
                    accumulate(&mut grads, bias, db);
                }
                Node::BatchNorm {
                    x, gamma, beta, stats, ..
                } => {
                    let (dx, dg, db) = ops::batchnorm_train_backward(x, gamma, stats, &gout);
                    accumulate(&mut grads, x, dx);
                    accumulate(&mut grads, gamma, dg);
                    accumulate(&mut grads, beta, db);
                }
                Node::SoftmaxXent {
                    probs,
                    labels,
                    logits_id,
                    ..
                } => {
                    let dlogits = ops::softmax_xent_backward(probs, labels, gout.item()?);
                    accumulate_by_id(&mut grads, *logits_id, dlogits);
                }
            }
        }

        let grads = grads
            .into_iter()
            .map(|(id, (shape, data))| {
                Tensor::new(shape, data).map(|t| (id, t))
            })
            .collect::<Result<HashMap<_, _>>>()?;
        Ok(GradStore {
            grads,
            seen: self.seen.clone(),
        })
    }
}

fn accumulate(grads: &mut HashMap<u64, (Vec<usize>, Vec<f32>)>, target: &Tensor, g: Tensor) {
    accumulate_by_id(grads, target.id(), g);
}

fn accumulate_by_id(grads: &mut HashMap<u64, (Vec<usize>, Vec<f32>)>, id: u64, g: Tensor) {
    match grads.entry(id) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            let (_, acc) = e.get_mut();
            for (a, b) in acc.iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert((g.shape().to_vec(), g.to_vec()));
        }
    }
}

/// Gradients keyed by tensor id, produced by [`GradTape::backward`].
pub struct GradStore {
    grads: HashMap<u64, Tensor>,
    seen: HashSet<u64>,
}

impl GradStore {
    /// Gradient of `t`. A tensor that participated in the forward pass but
    /// does not influence the loss gets a zero gradient; a tensor the tape
    /// never saw is an error.
    pub fn grad(&self, t: &Tensor) -> Result<Tensor> {
        if let Some(g) = self.grads.get(&t.id()) {
            Ok(g.clone())
        } else if self.seen.contains(&t.id()) {
            Ok(Tensor::zeros(t.shape()))
        } else {
            Err(Error::NotOnTape(t.id()))
        }
    }
}
