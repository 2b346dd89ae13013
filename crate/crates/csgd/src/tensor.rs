//! Dense rank-N tensors of 32-bit floats in row-major order.
//!
//! Every tensor carries a process-unique id so the gradient tape can refer to
//! it without owning the storage. Data is shared behind an `Arc`: clones are
//! cheap and a tensor's contents never change once an op has produced it.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, RngExt};

use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug)]
pub struct Tensor {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::new",
                left: format!("shape {:?} ({} elements)", shape, expected),
                right: format!("{} data values", data.len()),
            });
        }
        Ok(Tensor {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            id: fresh_id(),
            shape,
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Tensor {
            id: fresh_id(),
            shape,
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            id: fresh_id(),
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    /// Uniform values in `[lo, hi)` drawn from the given RNG in index order.
    pub fn uniform(shape: impl Into<Vec<usize>>, lo: f32, hi: f32, rng: &mut impl Rng) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.data.to_vec()
    }

    /// Value of a tensor with exactly one element.
    pub fn item(&self) -> Result<f32> {
        if self.len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "item() needs a single-element tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Same storage under a new shape (element count must match).
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor::reshape",
                left: format!("{:?}", self.shape),
                right: format!("{:?}", shape),
            });
        }
        Ok(Tensor {
            id: fresh_id(),
            shape,
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// The four dimensions of a rank-4 tensor.
    pub fn dims4(&self, what: &'static str) -> Result<[usize; 4]> {
        if self.shape.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: what,
                left: "rank-4 tensor".to_string(),
                right: format!("shape {:?}", self.shape),
            });
        }
        Ok([self.shape[0], self.shape[1], self.shape[2], self.shape[3]])
    }

    /// The two dimensions of a rank-2 tensor.
    pub fn dims2(&self, what: &'static str) -> Result<[usize; 2]> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: what,
                left: "rank-2 tensor".to_string(),
                right: format!("shape {:?}", self.shape),
            });
        }
        Ok([self.shape[0], self.shape[1]])
    }

    /// The single dimension of a rank-1 tensor.
    pub fn dims1(&self, what: &'static str) -> Result<usize> {
        if self.shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: what,
                left: "rank-1 tensor".to_string(),
                right: format!("shape {:?}", self.shape),
            });
        }
        Ok(self.shape[0])
    }
}

impl PartialEq for Tensor {
    /// Structural equality: same shape and bit-identical data.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
