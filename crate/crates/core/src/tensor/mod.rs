//! Dense row-major f32 tensors, the parameter banks that hold trainable
//! state, and the CPU kernels the toolkit's small CNNs need.
//!
//! Every kernel is a pure function over immutable inputs (the optimizer step
//! mutates only its bank) and accumulates in a fixed order, so identical
//! inputs produce bit-identical outputs regardless of thread count.

use thiserror::Error;

pub mod conv;
pub mod kernels;
pub mod optim;

pub use conv::{conv2d_backward, conv2d_forward};
pub use kernels::{
    dense_backward, dense_forward, global_avg_pool, global_avg_pool_backward, maxpool2d_backward,
    maxpool2d_forward, relu_backward, relu_forward, softmax_cross_entropy,
};
pub use optim::sgd_momentum_step;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("{op}: dimension `{dim}` mismatch: expected {expected}, got {got}")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {got:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} elements, data has {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} has a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("{op}: {message}")]
    BadHyperparam { op: &'static str, message: String },
    #[error("label {label} out of range [0, {num_classes}) at sample {sample}")]
    LabelOutOfRange {
        sample: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("non-finite gradient in parameter bank `{bank}`")]
    NonFiniteGrad { bank: String },
}

/// Dense N-dimensional array of f32 with row-major layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// All-zero tensor. Panics on a zero extent; use `from_vec` for fallible
    /// construction from external data.
    pub fn zeros(shape: &[usize]) -> Tensor {
        assert!(
            shape.iter().all(|&d| d >= 1),
            "zero extent in shape {shape:?}"
        );
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        let mut t = Tensor::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroExtent {
                shape: shape.to_vec(),
            });
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // invariant: all extents >= 1
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<(), TensorError> {
        if self.rank() != rank {
            return Err(TensorError::RankMismatch {
                op,
                expected: rank,
                got: self.shape.clone(),
            });
        }
        Ok(())
    }
}

/// Named trainable tensor with its gradient and momentum buffers.
#[derive(Debug, Clone)]
pub struct ParamBank {
    pub id: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub momentum_state: Tensor,
}

impl ParamBank {
    pub fn new(id: impl Into<String>, value: Tensor) -> ParamBank {
        let grad = Tensor::zeros(value.shape());
        let momentum_state = Tensor::zeros(value.shape());
        ParamBank {
            id: id.into(),
            value,
            grad,
            momentum_state,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        let err = Tensor::from_vec(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert_eq!(
            err,
            TensorError::DataLength {
                shape: vec![2, 3],
                expected: 6,
                got: 5
            }
        );
    }

    #[test]
    fn from_vec_rejects_zero_extent() {
        let err = Tensor::from_vec(&[2, 0], vec![]).unwrap_err();
        assert!(matches!(err, TensorError::ZeroExtent { .. }));
    }

    #[test]
    fn bank_buffers_match_value_shape() {
        let bank = ParamBank::new("w", Tensor::zeros(&[3, 4]));
        assert_eq!(bank.grad.shape(), &[3, 4]);
        assert_eq!(bank.momentum_state.shape(), &[3, 4]);
    }
}
