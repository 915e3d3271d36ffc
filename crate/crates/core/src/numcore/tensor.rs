use std::fmt;

use super::NumError;

/// Dense row-major array of `f64` values.
///
/// A `Tensor` is a plain value: it never carries gradient state. Tracked
/// values live on a [`Tape`](super::Tape) and are addressed through
/// [`Var`](super::Var) handles. The empty shape `[]` is a scalar.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumError> {
        if shape.contains(&0) {
            return Err(NumError::InvalidShape { shape });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        check_finite("tensor", &data)?;
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Result<Self, NumError> {
        Self::new(Vec::new(), vec![value])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self, NumError> {
        Self::new(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumError> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(NumError::Ragged);
        }
        Self::new(vec![m, n], rows.iter().flatten().copied().collect())
    }

    pub fn vector(values: &[f64]) -> Result<Self, NumError> {
        Self::new(vec![values.len()], values.to_vec())
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row count of a matrix; a vector counts as one row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the last axis (1 for scalars).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.cols();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn item(&self) -> Result<f64, NumError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(NumError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, NumError> {
        Self::new(shape, self.data.clone())
    }

    /// Copy with element `idx` shifted by `delta`; used by the finite-difference checker.
    pub(crate) fn perturbed(&self, idx: usize, delta: f64) -> Self {
        let mut data = self.data.clone();
        data[idx] += delta;
        Self {
            shape: self.shape.clone(),
            data,
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn check_finite(op: &'static str, data: &[f64]) -> Result<(), NumError> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(index) => Err(NumError::NonFinite { op, index }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
    }

    #[test]
    fn rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, NumError::NonFinite { index: 1, .. }));
        assert!(Tensor::scalar(f64::INFINITY).is_err());
    }

    #[test]
    fn scalar_has_empty_shape() {
        let s = Tensor::scalar(2.5).unwrap();
        assert!(s.shape().is_empty());
        assert_eq!(s.item().unwrap(), 2.5);
    }
}
