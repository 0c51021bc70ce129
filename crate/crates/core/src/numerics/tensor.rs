//! Row-major dense tensors.

use crate::error::{Error, Result};

use super::scalar::Scalar;

/// Dense row-major tensor with an optional gradient buffer of the same shape.
///
/// Rank 0 (`shape == []`) holds a single scalar; rank 1 is a vector; rank 2
/// is a matrix stored row by row.  Higher ranks are not needed and not
/// supported by the tape operations.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); len],
            grad: None,
        }
    }

    pub fn scalar(value: S) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    pub fn vector(data: Vec<S>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1, "item() on a multi-element tensor");
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::Contract(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Rows/columns view treating the last axis as the row: a rank-1 tensor
    /// is one row, a rank-2 tensor is its rows.  Rank 0 is rejected.
    pub fn rows(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[c] => Ok((1, c)),
            &[r, c] => Ok((r, c)),
            _ => Err(Error::Contract(format!(
                "expected rank 1 or 2, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[S] {
        let (_, cols) = self.dims2().expect("row() on a rank-2 tensor");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub fn grad_mut(&mut self) -> &mut [S] {
        if self.grad.is_none() {
            self.grad = Some(vec![S::zero(); self.data.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    /// Mutable data alongside the (read-only) gradient, for optimizers.
    pub fn data_and_grad_mut(&mut self) -> (&mut [S], Option<&[S]>) {
        (&mut self.data, self.grad.as_deref())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_deref_mut() {
            g.fill(S::zero());
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
