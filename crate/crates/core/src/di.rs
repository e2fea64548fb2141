//! Difference-image generation from a bitemporal pair.
//!
//! The dissimilarity at each pixel is the absolute log-ratio of local window
//! means, `|ln((mu1 + eps) / (mu2 + eps))|`, computed with edge-replicated
//! borders and then min-max normalized to [0, 1]. The map is symmetric in
//! the two inputs and invariant under joint positive rescaling; the whole
//! method sits behind these two functions so a different dissimilarity can
//! swap in without touching the rest of the pipeline.

use crate::error::{Error, Result};
use crate::plane::Plane;

pub const DEFAULT_WINDOW: usize = 3;
pub const DEFAULT_EPSILON: f32 = 1e-6;

/// Mean over the odd `window` x `window` neighborhood, edge-replicated.
pub fn window_mean(im: &Plane, window: usize) -> Result<Plane> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::config(format!("window must be odd, got {window}")));
    }
    let half = (window / 2) as isize;
    let inv = 1.0 / (window * window) as f64;
    let mut out = Plane::zeros(im.height(), im.width());
    for r in 0..im.height() {
        for c in 0..im.width() {
            let mut acc = 0.0f64;
            for dr in -half..=half {
                for dc in -half..=half {
                    acc += im.get_replicated(r as isize + dr, c as isize + dc) as f64;
                }
            }
            out.set(r, c, (acc * inv) as f32);
        }
    }
    Ok(out)
}

fn check_pair(im1: &Plane, im2: &Plane) -> Result<()> {
    if !im1.same_dims(im2) {
        return Err(Error::shape(format!(
            "image dims differ: {}x{} vs {}x{}",
            im1.height(),
            im1.width(),
            im2.height(),
            im2.width()
        )));
    }
    for (name, im) in [("im1", im1), ("im2", im2)] {
        if im.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::domain(format!(
                "{name} contains negative or non-finite amplitudes"
            )));
        }
    }
    Ok(())
}

/// The raw (un-normalized) absolute log-ratio of window means. Evaluated as
/// `ln(max + eps) - ln(min + eps)` so swapping the inputs gives bit-identical
/// results.
pub fn log_ratio_map(im1: &Plane, im2: &Plane, window: usize, epsilon: f32) -> Result<Plane> {
    check_pair(im1, im2)?;
    let mu1 = window_mean(im1, window)?;
    let mu2 = window_mean(im2, window)?;
    let data = mu1
        .data()
        .iter()
        .zip(mu2.data())
        .map(|(&a, &b)| {
            let hi = (a.max(b) + epsilon) as f64;
            let lo = (a.min(b) + epsilon) as f64;
            (hi.ln() - lo.ln()) as f32
        })
        .collect();
    Plane::from_vec(im1.height(), im1.width(), data)
}

/// Difference image: normalized log-ratio map in [0, 1]. Identical inputs
/// yield the all-zero map.
pub fn generate_di(im1: &Plane, im2: &Plane, window: usize, epsilon: f32) -> Result<Plane> {
    Ok(log_ratio_map(im1, im2, window, epsilon)?.normalized())
}
