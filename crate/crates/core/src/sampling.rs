//! Boundary-guided stratified patch sampling.
//!
//! Training centers are drawn without replacement: a share from the
//! morphological band around reference change boundaries, the rest split
//! evenly between changed and unchanged pixels outside the band. When a
//! pool cannot fill its quota the shortfall is redistributed across the
//! other pools proportionally to their spare capacity, so the requested
//! count is always met without draining a small stratum — with
//! `fraction = 1` every pixel is drawn exactly once.

use crate::error::{Error, Result};
use crate::model::{IN_CHANNELS, PATCH};
use crate::plane::Plane;
use crate::rng::substream;
use crate::scene::ScenePair;
use crate::tensor::Tensor;
use rand::seq::index;

#[derive(Clone, Copy, Debug)]
pub struct SampleSpec {
    /// Fraction of pixel positions drawn as patch centers.
    pub fraction: f64,
    /// Share of centers drawn from the boundary band.
    pub boundary_share: f64,
    /// Half-width of the morphological boundary band, in pixels.
    pub boundary_band: usize,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        SampleSpec {
            fraction: 0.20,
            boundary_share: 0.50,
            boundary_band: 2,
            seed: 0,
        }
    }
}

/// A batch of 32x32x3 input patches with per-pixel binary labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    pub inputs: Tensor<f32>,
    pub labels: Tensor<f32>,
}

impl PatchBatch {
    pub fn new(inputs: Tensor<f32>, labels: Tensor<f32>) -> Result<Self> {
        match (inputs.dims(), labels.dims()) {
            ([n1, PATCH, PATCH, IN_CHANNELS], [n2, PATCH, PATCH]) if n1 == n2 && *n1 >= 1 => {}
            _ => {
                return Err(Error::shape(format!(
                    "patch batch dims {:?} / {:?} invalid",
                    inputs.dims(),
                    labels.dims()
                )))
            }
        }
        if inputs.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::domain("patch inputs must lie in [0, 1]"));
        }
        if !labels.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::domain("patch labels must be binary"));
        }
        Ok(PatchBatch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn concat(batches: &[PatchBatch]) -> Result<PatchBatch> {
        if batches.is_empty() {
            return Err(Error::config("cannot concatenate zero patch batches"));
        }
        let n: usize = batches.iter().map(|b| b.len()).sum();
        let mut inputs = Vec::with_capacity(n * PATCH * PATCH * IN_CHANNELS);
        let mut labels = Vec::with_capacity(n * PATCH * PATCH);
        for b in batches {
            inputs.extend_from_slice(b.inputs.data());
            labels.extend_from_slice(b.labels.data());
        }
        Ok(PatchBatch {
            inputs: Tensor::from_vec(&[n, PATCH, PATCH, IN_CHANNELS], inputs)?,
            labels: Tensor::from_vec(&[n, PATCH, PATCH], labels)?,
        })
    }
}

/// Square-window max filter (dilation for binary masks), edge-clamped,
/// separable in rows then columns.
fn square_max(im: &Plane, radius: usize) -> Plane {
    let (h, w) = (im.height(), im.width());
    let r = radius as isize;
    let mut rows = Plane::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut m = f32::NEG_INFINITY;
            for d in -r..=r {
                m = m.max(im.get_replicated(i as isize, j as isize + d));
            }
            rows.set(i, j, m);
        }
    }
    let mut out = Plane::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            let mut m = f32::NEG_INFINITY;
            for d in -r..=r {
                m = m.max(rows.get_replicated(i as isize + d, j as isize));
            }
            out.set(i, j, m);
        }
    }
    out
}

fn square_min(im: &Plane, radius: usize) -> Plane {
    let inverted = Plane::from_vec(
        im.height(),
        im.width(),
        im.data().iter().map(|&v| 1.0 - v).collect(),
    )
    .unwrap();
    let d = square_max(&inverted, radius);
    Plane::from_vec(
        im.height(),
        im.width(),
        d.data().iter().map(|&v| 1.0 - v).collect(),
    )
    .unwrap()
}

/// Morphological gradient band around change boundaries:
/// `dilation(reference, square band) XOR erosion(reference, square band)`.
pub fn boundary_band(reference: &Plane, band: usize) -> Result<Plane> {
    if !reference.is_binary() {
        return Err(Error::domain("reference mask is not binary"));
    }
    if band == 0 {
        return Plane::from_vec(reference.height(), reference.width(), vec![0.0; reference.len()]);
    }
    let dil = square_max(reference, band);
    let ero = square_min(reference, band);
    let data = dil
        .data()
        .iter()
        .zip(ero.data())
        .map(|(&a, &b)| if a != b { 1.0 } else { 0.0 })
        .collect();
    Plane::from_vec(reference.height(), reference.width(), data)
}

/// Top-left anchored 32x32 crop across the three channels, edge-replicated.
pub(crate) fn crop_patch(channels: &[Plane; 3], r0: isize, c0: isize) -> Vec<f32> {
    let mut out = Vec::with_capacity(PATCH * PATCH * IN_CHANNELS);
    for dr in 0..PATCH as isize {
        for dc in 0..PATCH as isize {
            for ch in channels {
                out.push(ch.get_replicated(r0 + dr, c0 + dc));
            }
        }
    }
    out
}

fn crop_labels(reference: &Plane, r0: isize, c0: isize) -> Vec<f32> {
    let mut out = Vec::with_capacity(PATCH * PATCH);
    for dr in 0..PATCH as isize {
        for dc in 0..PATCH as isize {
            out.push(reference.get_replicated(r0 + dr, c0 + dc));
        }
    }
    out
}

/// Output of [`sample_patches`]: the training batch, the drawn centers in
/// draw order, and a mask of those centers for evaluation exclusion.
#[derive(Clone, Debug)]
pub struct SampleResult {
    pub batch: PatchBatch,
    pub centers: Vec<(usize, usize)>,
    pub center_mask: Plane,
}

pub fn sample_patches(scene: &ScenePair, spec: &SampleSpec) -> Result<SampleResult> {
    let reference = scene
        .reference
        .as_ref()
        .ok_or_else(|| Error::config("scene has no reference mask"))?;
    let channels = scene.channels()?;
    let (h, w) = (scene.height(), scene.width());
    if h <= PATCH || w <= PATCH {
        return Err(Error::config(format!(
            "scene {h}x{w} must be larger than {PATCH}x{PATCH}"
        )));
    }
    if !(spec.fraction > 0.0 && spec.fraction <= 1.0) {
        return Err(Error::config("fraction must lie in (0, 1]"));
    }
    if !(0.0..=1.0).contains(&spec.boundary_share) {
        return Err(Error::config("boundary_share must lie in [0, 1]"));
    }
    let total = ((spec.fraction * (h * w) as f64).floor() as usize).min(h * w);
    if total == 0 {
        return Err(Error::config("fraction draws zero centers"));
    }

    let band = boundary_band(reference, spec.boundary_band)?;
    let mut band_px = Vec::new();
    let mut changed_px = Vec::new();
    let mut unchanged_px = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if band.get(r, c) == 1.0 {
                band_px.push((r, c));
            } else if reference.get(r, c) == 1.0 {
                changed_px.push((r, c));
            } else {
                unchanged_px.push((r, c));
            }
        }
    }

    // quota arithmetic first, then one draw per pool; shortfall of any pool
    // is redistributed proportionally to the spare capacity of the others
    let sizes = [band_px.len(), changed_px.len(), unchanged_px.len()];
    let q_band = (spec.boundary_share * total as f64).round() as usize;
    let rest = total.saturating_sub(q_band);
    let quotas = [q_band.min(total), rest / 2, rest - rest / 2];
    let mut draws = [0usize; 3];
    for i in 0..3 {
        draws[i] = quotas[i].min(sizes[i]);
    }
    let mut shortfall = total - draws.iter().sum::<usize>();
    while shortfall > 0 {
        let spare: Vec<usize> = (0..3).map(|i| sizes[i] - draws[i]).collect();
        let total_spare: usize = spare.iter().sum();
        debug_assert!(total_spare >= shortfall, "fraction <= 1 guarantees capacity");
        let mut assigned = 0;
        for i in 0..3 {
            let add = ((shortfall as u128 * spare[i] as u128) / total_spare as u128) as usize;
            draws[i] += add;
            assigned += add;
        }
        if assigned == 0 {
            // left-over units smaller than any proportional share: give one
            // to the pool with the most spare capacity (ties by pool order)
            let i = (0..3).max_by_key(|&i| sizes[i] - draws[i]).unwrap();
            draws[i] += 1;
            assigned = 1;
        }
        shortfall -= assigned;
    }

    let mut rng = substream(spec.seed, "sampling");
    let mut centers = Vec::with_capacity(total);
    for (pool, count) in [
        (&band_px, draws[0]),
        (&changed_px, draws[1]),
        (&unchanged_px, draws[2]),
    ] {
        for i in index::sample(&mut rng, pool.len(), count) {
            centers.push(pool[i]);
        }
    }

    let mut inputs = Vec::with_capacity(total * PATCH * PATCH * IN_CHANNELS);
    let mut labels = Vec::with_capacity(total * PATCH * PATCH);
    let mut center_mask = Plane::zeros(h, w);
    let half = (PATCH / 2) as isize;
    for &(r, c) in &centers {
        let (r0, c0) = (r as isize - half, c as isize - half);
        inputs.extend_from_slice(&crop_patch(&channels, r0, c0));
        labels.extend_from_slice(&crop_labels(reference, r0, c0));
        center_mask.set(r, c, 1.0);
    }

    let batch = PatchBatch::new(
        Tensor::from_vec(&[total, PATCH, PATCH, IN_CHANNELS], inputs)?,
        Tensor::from_vec(&[total, PATCH, PATCH], labels)?,
    )?;
    Ok(SampleResult {
        batch,
        centers,
        center_mask,
    })
}
