//! Dense row-major tensors, a tape-based reverse-mode autodiff graph, and Adam.
//!
//! Parameters live in a [`ParamStore`]. A fresh [`Graph`] is built for every
//! forward pass; parameters enter it through [`Graph::param`] and
//! [`Graph::backward`] accumulates their gradients back into the store.

mod adam;
mod graph;
mod params;
pub mod gradcheck;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use graph::{log_sum_exp, softmax_in_place, Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};

use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} elements")]
    BadLength { shape: Vec<usize>, len: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: index {index} out of range for size {size}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A dense tensor with an optional gradient buffer of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::BadLength {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
            grad: None,
        }
    }

    pub fn scalar(v: S) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows and columns when viewed as a matrix; vectors are one row.
    pub fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            dims => {
                let c = *dims.last().unwrap();
                (self.data.len() / c.max(1), c)
            }
        }
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<S> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![S::zero(); n])
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = S::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, delta: &[S]) {
        debug_assert_eq!(delta.len(), self.data.len());
        for (g, d) in self.grad_mut().iter_mut().zip(delta) {
            *g += *d;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn length_must_match_shape() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::BadLength { len: 5, .. }));
    }

    #[test]
    fn grad_has_parameter_shape() {
        let mut t = Tensor::<f64>::zeros(vec![4]);
        assert!(t.grad().is_none());
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.grad().unwrap().len(), t.numel());
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
    }
}
