//! Dense row-major tensors.

use crate::error::{Error, Result};
use crate::scalar::{self, Scalar};

/// Dense tensor with a row-major value buffer.
///
/// Every dimension is positive and the buffer length equals the product of
/// the shape. Values passed to [`Tensor::new`] must be finite.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f64> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        validate_shape(&shape, data.len())?;
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "tensor value at flat index {pos} is not finite"
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds a tensor without the finiteness scan. Shape must already agree.
    pub(crate) fn from_raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::from_raw(shape, vec![T::zero(); n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor::from_raw(vec![1], vec![value])
    }

    pub fn vector(data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    /// Stacks equally sized rows into a matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape(
                    "from_rows",
                    format!("row {i} has {} columns, expected {cols}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access to the buffer. Callers are responsible for keeping it finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Rows of a matrix; a 1-D tensor counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        *self.shape.last().expect("shape is never empty")
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert!(self.is_scalar(), "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn norm(&self) -> T {
        scalar::l2_norm(&self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor::from_raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn same_shape(&self, other: &Tensor<T>) -> bool {
        self.shape == other.shape
    }

    /// Gathers rows by index into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor::from_raw(vec![indices.len(), c], data)
    }

    /// Converts the element type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor::from_raw(
            self.shape.clone(),
            self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        )
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn validate_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} must have positive dimensions"),
        ));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::shape(
            "tensor",
            format!("shape {shape:?} holds {n} values but {len} were given"),
        ));
    }
    Ok(())
}
