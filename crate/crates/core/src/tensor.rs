//! Dense row-major tensor.
//!
//! The single value carrier for inputs, activations, parameters and
//! gradients. Deliberately minimal: shape bookkeeping, row access for the
//! leading (batch) dimension, and a few element-wise helpers the training
//! and crafting loops need.

use crate::error::{Error, Result};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    /// Builds a tensor; `data` length must equal the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} needs {expect} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: Vec<usize>, value: S) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// 1-D tensor from a plain vector.
    pub fn from_vec(data: Vec<S>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Reinterprets the data under a new shape of equal volume.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape("reshape", &shape, &self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Leading (batch) extent.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Flattened length of one batch row.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, b: usize) -> &[S] {
        let w = self.row_len();
        &self.data[b * w..(b + 1) * w]
    }

    pub fn row_mut(&mut self, b: usize) -> &mut [S] {
        let w = self.row_len();
        &mut self.data[b * w..(b + 1) * w]
    }

    /// Copies batch row `b` into a stand-alone `[1, ...]` tensor.
    pub fn row_tensor(&self, b: usize) -> Tensor<S> {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.row(b).to_vec(),
        }
    }

    /// Stacks `[1, ...]`-shaped rows back into one batch tensor.
    pub fn stack_rows(rows: &[Tensor<S>]) -> Result<Tensor<S>> {
        let first = rows
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack_rows: no rows".into()))?;
        let mut shape = first.shape.clone();
        shape[0] = rows.len();
        let mut data = Vec::with_capacity(first.len() * rows.len());
        for r in rows {
            if r.shape != first.shape {
                return Err(Error::shape("stack_rows", &first.shape, &r.shape));
            }
            data.extend_from_slice(&r.data);
        }
        Ok(Tensor { shape, data })
    }

    pub fn map_inplace(&mut self, f: impl Fn(S) -> S) {
        for v in &mut self.data {
            *v = f(*v);
        }
    }

    /// `self -= scale * other`, element-wise.
    pub fn sub_scaled(&mut self, other: &Tensor<S>, scale: S) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape("sub_scaled", &self.shape, &other.shape));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a - scale * b;
        }
        Ok(())
    }

    /// Clamps every element into `[lo, hi]`.
    pub fn clamp_inplace(&mut self, lo: S, hi: S) {
        for v in &mut self.data {
            if *v < lo {
                *v = lo;
            } else if *v > hi {
                *v = hi;
            }
        }
    }

    /// Errors with `context` if any element is NaN or infinite.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericOverflow(format!(
                "non-finite value in {context}"
            )))
        }
    }
}

impl Tensor<f64> {
    /// Bit-level equality (distinguishes what `==` on floats cannot).
    pub fn bits_eq(&self, other: &Tensor<f64>) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}
