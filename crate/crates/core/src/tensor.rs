//! Dense tensors in channels-last layout.
//!
//! Rank 3 is `H x W x C`, rank 4 is `N x H x W x C`; rank 1/2 cover bias
//! vectors and per-pixel label maps. Data is contiguous row-major over the
//! dims, so the channel vector at a fixed spatial position is a contiguous
//! slice — the hot layer kernels rely on that.

use crate::error::{Error, Result};
use std::fmt::{Debug, Display};

/// Element type of the numeric paths: f32 for training, f64 for the
/// gradient-check oracle path.
pub trait Scalar:
    num_traits::Float + num_traits::NumAssignOps + Copy + Send + Sync + Debug + Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)
        } else {
            write!(f, " [{} values]", self.data.len())
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(dims: &[usize]) -> Self {
        assert!(
            !dims.is_empty() && dims.len() <= 4 && dims.iter().all(|&d| d >= 1),
            "tensor dims must be rank 1..=4 with all extents >= 1, got {dims:?}"
        );
        let len = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    pub fn filled(dims: &[usize], value: T) -> Self {
        let mut t = Self::zeros(dims);
        t.data.fill(value);
        t
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 || dims.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!(
                "tensor dims must be rank 1..=4 with all extents >= 1, got {dims:?}"
            )));
        }
        let expect: usize = dims.iter().product();
        if expect != data.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} imply {expect} values but {} were given",
                data.len()
            )));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Bounds-checked element read with a full multi-index.
    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let off = self.offset(idx);
        self.data[off] = value;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(
            idx.len(),
            self.dims.len(),
            "index rank {} does not match tensor rank {}",
            idx.len(),
            self.dims.len()
        );
        let mut off = 0;
        for (i, (&ix, &d)) in idx.iter().zip(&self.dims).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} (extent {d})");
            off = off * d + ix;
        }
        off
    }

    /// Contiguous channel row at the given leading indices (all dims except
    /// the last). For a rank-3 tensor pass `[h, w]` and get the `C` slice.
    pub fn row(&self, lead: &[usize]) -> &[T] {
        let c = *self.dims.last().unwrap();
        let mut off = 0;
        for (i, (&ix, &d)) in lead.iter().zip(&self.dims).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} (extent {d})");
            off = off * d + ix;
        }
        let start = off * c;
        &self.data[start..start + c]
    }

    pub fn row_mut(&mut self, lead: &[usize]) -> &mut [T] {
        let c = *self.dims.last().unwrap();
        let mut off = 0;
        for (i, (&ix, &d)) in lead.iter().zip(&self.dims).enumerate() {
            assert!(ix < d, "index {ix} out of bounds for axis {i} (extent {d})");
            off = off * d + ix;
        }
        let start = off * c;
        &mut self.data[start..start + c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of sample `n` of a rank-4 tensor as a rank-3 tensor.
    pub fn batch_slice(&self, n: usize) -> Tensor<T> {
        assert_eq!(self.rank(), 4, "batch_slice needs a rank-4 tensor");
        assert!(n < self.dims[0]);
        let per = self.len() / self.dims[0];
        Tensor {
            dims: self.dims[1..].to_vec(),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stack rank-3 tensors of identical dims into a rank-4 batch.
    pub fn stack(samples: &[Tensor<T>]) -> Result<Tensor<T>> {
        if samples.is_empty() {
            return Err(Error::shape("cannot stack zero tensors"));
        }
        let dims = samples[0].dims.clone();
        if samples.iter().any(|s| s.dims != dims) {
            return Err(Error::shape("stack requires identical dims"));
        }
        let mut data = Vec::with_capacity(samples.len() * samples[0].len());
        for s in samples {
            data.extend_from_slice(&s.data);
        }
        let mut out_dims = vec![samples.len()];
        out_dims.extend_from_slice(&dims);
        Tensor::from_vec(&out_dims, data)
    }

    /// Cast elementwise to another scalar type (used to move between the
    /// f32 training path and the f64 oracle path).
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}
