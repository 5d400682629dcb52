//! Dense row-major `f32` containers for feature channels.

use crate::error::{Error, Result};

/// A `rows x cols` row-major matrix of binary32 features.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows<R: AsRef<[f32]>>(cols: usize, rows: &[R]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact on an empty matrix with cols == 0 would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    /// Bitwise equality, so that `-0.0 != 0.0` and identical NaN payloads compare equal.
    pub fn bit_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Per-item caption features: `items x captions x dim`, stored in
/// (item, caption, dim) order.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionTensor {
    items: usize,
    captions: usize,
    dim: usize,
    data: Vec<f32>,
}

impl CaptionTensor {
    pub fn new(items: usize, captions: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != items * captions * dim {
            return Err(Error::DimensionMismatch {
                expected: items * captions * dim,
                actual: data.len(),
            });
        }
        Ok(Self {
            items,
            captions,
            dim,
            data,
        })
    }

    pub fn empty(items: usize, dim: usize) -> Self {
        Self {
            items,
            captions: 0,
            dim,
            data: Vec::new(),
        }
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn captions(&self) -> usize {
        self.captions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The `captions x dim` block belonging to one item.
    #[inline]
    pub fn item(&self, i: usize) -> &[f32] {
        let stride = self.captions * self.dim;
        &self.data[i * stride..(i + 1) * stride]
    }

    #[inline]
    pub fn caption(&self, item: usize, caption: usize) -> &[f32] {
        let start = (item * self.captions + caption) * self.dim;
        &self.data[start..start + self.dim]
    }

    #[inline]
    pub fn caption_mut(&mut self, item: usize, caption: usize) -> &mut [f32] {
        let start = (item * self.captions + caption) * self.dim;
        &mut self.data[start..start + self.dim]
    }

    /// Keeps only the first `n` captions of every item.
    pub fn truncated(&self, n: usize) -> Result<Self> {
        if n > self.captions {
            return Err(Error::CaptionCount {
                requested: n,
                available: self.captions,
            });
        }
        let mut data = Vec::with_capacity(self.items * n * self.dim);
        for i in 0..self.items {
            data.extend_from_slice(&self.item(i)[..n * self.dim]);
        }
        Ok(Self {
            items: self.items,
            captions: n,
            dim: self.dim,
            data,
        })
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn bit_eq(&self, other: &CaptionTensor) -> bool {
        self.items == other.items
            && self.captions == other.captions
            && self.dim == other.dim
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
