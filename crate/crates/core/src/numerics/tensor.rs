use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    #[serde(skip)]
    grad: Option<Vec<f64>>,
    #[serde(skip)]
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(HintError::Shape(format!(
                "shape {shape:?} holds {numel} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(HintError::Shape("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.set_requires_grad(flag);
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
        self.grad = if flag { Some(vec![0.0; self.data.len()]) } else { None };
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Adds `delta` into the gradient buffer. No-op when the tensor is not trainable.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.data.len());
        if let Some(g) = self.grad.as_mut() {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
    }

    /// Interprets the tensor as a matrix: the last axis is the column count and
    /// every leading axis is folded into rows. Scalars and vectors become one row.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols.max(1), cols)
            }
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(HintError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims2();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch in comparison");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Equality of shape and bit patterns of every element.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_buffer_tracks_flag() {
        let mut t = Tensor::zeros(&[2, 2]).with_requires_grad(true);
        assert_eq!(t.grad().unwrap().len(), 4);
        t.accumulate_grad(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.grad().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn dims2_folds_leading_axes() {
        let t = Tensor::zeros(&[3, 4, 5]);
        assert_eq!(t.dims2(), (12, 5));
        assert_eq!(Tensor::zeros(&[7]).dims2(), (1, 7));
    }
}
