//! Single-channel 2-D image plane, row-major f32.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Plane {
    pub fn zeros(h: usize, w: usize) -> Self {
        assert!(h >= 1 && w >= 1, "plane extents must be >= 1");
        Plane {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::shape("plane extents must be >= 1"));
        }
        if data.len() != h * w {
            return Err(Error::shape(format!(
                "plane {h}x{w} needs {} values, got {}",
                h * w,
                data.len()
            )));
        }
        Ok(Plane { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn same_dims(&self, other: &Plane) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        assert!(r < self.h && c < self.w, "plane index out of bounds");
        self.data[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        assert!(r < self.h && c < self.w, "plane index out of bounds");
        self.data[r * self.w + c] = v;
    }

    /// Read with edge replication for out-of-range indices.
    pub fn get_replicated(&self, r: isize, c: isize) -> f32 {
        let r = r.clamp(0, self.h as isize - 1) as usize;
        let c = c.clamp(0, self.w as isize - 1) as usize;
        self.data[r * self.w + c]
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        (lo, hi)
    }

    /// Min-max rescale to [0, 1]; a constant plane maps to all zeros.
    pub fn normalized(&self) -> Plane {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        if !(span > 0.0) {
            return Plane::zeros(self.h, self.w);
        }
        Plane {
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| (v - lo) / span).collect(),
        }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1.0).count()
    }
}
