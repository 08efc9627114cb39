//! Dense row-major tensor.
//!
//! Values live in flat `Vec<T>` storage with an explicit shape. Gradient
//! bookkeeping is not stored here; it belongs to the [`crate::tape::Tape`]
//! that records operations over these values.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array, row-major.
///
/// Invariant: `shape.iter().product() == data.len()` and every extent is
/// positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {shape:?} implies {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::ZERO; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// 2-D constructor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|row| row.len()).unwrap_or(0);
        if r == 0 || c == 0 {
            return Err(Error::contract("from_rows: empty matrix"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::contract("from_rows: ragged rows"));
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor {
            shape: vec![r, c],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows of a 2-D tensor (first extent for higher ranks).
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Columns of a 2-D tensor (product of trailing extents otherwise).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// True when every element is finite (no NaN/Inf).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Flat 2-norm of all elements, fixed summation order.
    pub fn norm2(&self) -> T {
        let mut acc = T::ZERO;
        for &v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    /// Convert elementwise to another scalar type (used for 64-bit oracles).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_numel() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn norm2_matches_hand_value() {
        let t = Tensor::new(vec![2, 2], vec![3.0f64, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(t.norm2(), 5.0);
    }

    #[test]
    fn cast_round_trips_f32_values() {
        let t = Tensor::new(vec![3], vec![1.5f32, -2.25, 0.125]).unwrap();
        let d: Tensor<f64> = t.cast();
        let back: Tensor<f32> = d.cast();
        assert_eq!(t, back);
    }
}
