//! Dense row-major `f64` tensors.

use crate::error::{Error, Result};

/// An n-dimensional array of `f64` values in row-major order.
///
/// A scalar has an empty shape and exactly one element.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape is {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of bounds for axis {i} of size {dim}");
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Rows of the leading axis, gathered in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Tensor {
        assert!(!self.shape.is_empty(), "select_rows on a scalar");
        let row_len: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * row_len);
        for &r in rows {
            data.extend_from_slice(&self.data[r * row_len..(r + 1) * row_len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor { shape, data }
    }

    /// Concatenate along the leading axis. All trailing dimensions must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::Empty("concat of zero tensors".into()))?;
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() != first.shape.len() || &p.shape[1..] != tail {
                return Err(Error::shape(
                    "concat_rows",
                    format!("trailing dims {:?} vs {:?}", &p.shape[1..], tail),
                ));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Ok(Tensor { shape, data })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2, "row() needs a matrix");
        let n = self.shape[1];
        &self.data[i * n..(i + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }
}
