//! Synthetic speckled scene generation.
//!
//! A piecewise-smooth positive background is built from a few random
//! Gaussian bumps; change regions are non-overlapping discs whose intensity
//! is multiplied by `contrast` in the second acquisition. Both images carry
//! independent per-pixel multiplicative gamma speckle with shape `looks` and
//! unit mean (the standard L-look intensity model, variance `1/looks`).

use crate::error::{Error, Result};
use crate::plane::Plane;
use crate::rng::substream;
use crate::scene::ScenePair;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    pub looks: u32,
    pub n_regions: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub contrast: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 256,
            width: 256,
            looks: 4,
            n_regions: 8,
            radius_min: 10.0,
            radius_max: 18.0,
            contrast: 4.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Disc {
    pub row: f64,
    pub col: f64,
    pub radius: f64,
}

/// Generation record: the drawn disc parameters plus the realized changed
/// fraction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthMeta {
    pub spec: SynthSpec,
    pub discs: Vec<Disc>,
    pub changed_fraction: f64,
}

fn validate(spec: &SynthSpec) -> Result<()> {
    if spec.height < 8 || spec.width < 8 {
        return Err(Error::config("scene must be at least 8x8"));
    }
    if spec.looks < 1 {
        return Err(Error::config("looks must be >= 1"));
    }
    if !(spec.contrast > 1.0) {
        return Err(Error::config("contrast must be > 1"));
    }
    if !(spec.radius_min > 0.0) || spec.radius_max < spec.radius_min {
        return Err(Error::config("invalid radius range"));
    }
    let max_fit = (spec.height.min(spec.width) as f64 - 1.0) / 2.0;
    if spec.radius_max >= max_fit {
        return Err(Error::config(format!(
            "radius_max {} cannot fit inside a {}x{} scene",
            spec.radius_max, spec.height, spec.width
        )));
    }
    Ok(())
}

fn place_discs(spec: &SynthSpec, rng: &mut impl Rng) -> Result<Vec<Disc>> {
    let mut discs: Vec<Disc> = Vec::with_capacity(spec.n_regions);
    let mut attempts = 0usize;
    let max_attempts = 1000 * spec.n_regions.max(1);
    while discs.len() < spec.n_regions {
        if attempts >= max_attempts {
            return Err(Error::config(format!(
                "could not place {} non-overlapping discs of radius {}..{} in a {}x{} scene",
                spec.n_regions, spec.radius_min, spec.radius_max, spec.height, spec.width
            )));
        }
        attempts += 1;
        let radius = rng.random_range(spec.radius_min..=spec.radius_max);
        let row = rng.random_range(radius..(spec.height as f64 - 1.0 - radius));
        let col = rng.random_range(radius..(spec.width as f64 - 1.0 - radius));
        let overlaps = discs.iter().any(|d| {
            let dr = d.row - row;
            let dc = d.col - col;
            (dr * dr + dc * dc).sqrt() < d.radius + radius + 1.0
        });
        if !overlaps {
            discs.push(Disc { row, col, radius });
        }
    }
    Ok(discs)
}

fn background(spec: &SynthSpec, rng: &mut impl Rng) -> Plane {
    let (h, w) = (spec.height, spec.width);
    let n_bumps = 6;
    let bumps: Vec<(f64, f64, f64, f64)> = (0..n_bumps)
        .map(|_| {
            let amp = rng.random_range(-0.6..1.2);
            let cr = rng.random_range(0.0..h as f64);
            let cc = rng.random_range(0.0..w as f64);
            let sigma = rng.random_range(h.min(w) as f64 / 8.0..h.min(w) as f64 / 3.0);
            (amp, cr, cc, sigma)
        })
        .collect();
    let mut out = Plane::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let mut v = 1.0f64;
            for &(amp, cr, cc, sigma) in &bumps {
                let d2 = (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2);
                v += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
            out.set(r, c, v.max(0.05) as f32);
        }
    }
    out
}

fn speckle_plane(h: usize, w: usize, looks: u32, rng: &mut impl Rng) -> Plane {
    let shape = looks as f64;
    let gamma = Gamma::new(shape, 1.0 / shape).unwrap();
    let mut out = Plane::zeros(h, w);
    for v in out.data_mut() {
        *v = gamma.sample(rng) as f32;
    }
    out
}

pub fn synth_scene(spec: &SynthSpec) -> Result<(ScenePair, SynthMeta)> {
    validate(spec)?;
    let (h, w) = (spec.height, spec.width);

    let bg = background(spec, &mut substream(spec.seed, "synth.background"));
    let discs = place_discs(spec, &mut substream(spec.seed, "synth.regions"))?;

    let mut reference = Plane::zeros(h, w);
    for d in &discs {
        let r0 = (d.row - d.radius).floor().max(0.0) as usize;
        let r1 = ((d.row + d.radius).ceil() as usize).min(h - 1);
        let c0 = (d.col - d.radius).floor().max(0.0) as usize;
        let c1 = ((d.col + d.radius).ceil() as usize).min(w - 1);
        for r in r0..=r1 {
            for c in c0..=c1 {
                let dr = r as f64 - d.row;
                let dc = c as f64 - d.col;
                if dr * dr + dc * dc <= d.radius * d.radius {
                    reference.set(r, c, 1.0);
                }
            }
        }
    }

    let s1 = speckle_plane(h, w, spec.looks, &mut substream(spec.seed, "synth.speckle1"));
    let s2 = speckle_plane(h, w, spec.looks, &mut substream(spec.seed, "synth.speckle2"));

    let mut im1 = Plane::zeros(h, w);
    let mut im2 = Plane::zeros(h, w);
    for i in 0..h * w {
        let b = bg.data()[i];
        let changed = reference.data()[i] == 1.0;
        let b2 = if changed { b * spec.contrast as f32 } else { b };
        im1.data_mut()[i] = b * s1.data()[i];
        im2.data_mut()[i] = b2 * s2.data()[i];
    }

    let changed_fraction = reference.count_ones() as f64 / (h * w) as f64;
    let scene = ScenePair::new(format!("synth-{}", spec.seed), im1, im2, Some(reference))?;
    let meta = SynthMeta {
        spec: spec.clone(),
        discs,
        changed_fraction,
    };
    Ok((scene, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_under_seed() {
        let spec = SynthSpec {
            height: 64,
            width: 64,
            n_regions: 2,
            radius_min: 6.0,
            radius_max: 9.0,
            ..SynthSpec::default()
        };
        let (a, ma) = synth_scene(&spec).unwrap();
        let (b, mb) = synth_scene(&spec).unwrap();
        assert_eq!(a.im1, b.im1);
        assert_eq!(a.im2, b.im2);
        assert_eq!(a.reference, b.reference);
        assert_eq!(ma.discs.len(), mb.discs.len());
    }

    #[test]
    fn high_looks_approaches_clean_background() {
        let spec = SynthSpec {
            height: 96,
            width: 96,
            looks: 1_000_000,
            n_regions: 0,
            seed: 3,
            ..SynthSpec::default()
        };
        let (scene, _) = synth_scene(&spec).unwrap();
        let bg = background(&spec, &mut substream(spec.seed, "synth.background"));
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (a, b) in scene.im1.data().iter().zip(bg.data()) {
            num += ((a - b) as f64).powi(2);
            den += (*b as f64).powi(2);
        }
        let rel_rms = (num / den).sqrt();
        assert!(rel_rms < 0.01, "relative rms {rel_rms}");
    }

    #[test]
    fn speckle_moments_match_gamma_model() {
        let looks = 4;
        let mut rng = substream(7, "synth.speckle-test");
        let s = speckle_plane(256, 256, looks, &mut rng);
        let n = s.len() as f64;
        let mean: f64 = s.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        let var: f64 = s
            .data()
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n;
        assert!((mean - 1.0).abs() < 0.02, "speckle mean {mean}");
        let expected_var = 1.0 / looks as f64;
        assert!(
            (var - expected_var).abs() < 0.1 * expected_var,
            "speckle var {var} vs {expected_var}"
        );
    }

    #[test]
    fn reference_area_matches_disc_lattice_counts() {
        let spec = SynthSpec {
            height: 128,
            width: 128,
            n_regions: 4,
            seed: 11,
            ..SynthSpec::default()
        };
        let (scene, meta) = synth_scene(&spec).unwrap();
        // discs are non-overlapping, so the mask area is the sum of each
        // disc's own lattice count
        let mut expected = 0usize;
        for d in &meta.discs {
            for r in 0..spec.height {
                for c in 0..spec.width {
                    let dr = r as f64 - d.row;
                    let dc = c as f64 - d.col;
                    if dr * dr + dc * dc <= d.radius * d.radius {
                        expected += 1;
                    }
                }
            }
        }
        let got = scene.reference.as_ref().unwrap().count_ones();
        assert!(
            (got as isize - expected as isize).unsigned_abs() <= meta.discs.len(),
            "mask area {got} vs lattice count {expected}"
        );
    }

    #[test]
    fn contrast_shows_up_inside_discs() {
        let spec = SynthSpec {
            height: 160,
            width: 160,
            looks: 4,
            n_regions: 3,
            radius_min: 14.0,
            radius_max: 18.0,
            contrast: 4.0,
            seed: 23,
        };
        let (scene, _) = synth_scene(&spec).unwrap();
        let reference = scene.reference.as_ref().unwrap();
        let mut in1 = 0.0f64;
        let mut in2 = 0.0f64;
        let mut count = 0usize;
        for i in 0..reference.len() {
            if reference.data()[i] == 1.0 {
                in1 += scene.im1.data()[i] as f64;
                in2 += scene.im2.data()[i] as f64;
                count += 1;
            }
        }
        assert!(count >= 500, "disc area too small for the moment check");
        let ratio = in2 / in1;
        assert!(
            (ratio - spec.contrast).abs() < 0.1 * spec.contrast,
            "intensity ratio {ratio} vs contrast {}",
            spec.contrast
        );
    }

    #[test]
    fn unplaceable_regions_is_config_error() {
        let spec = SynthSpec {
            height: 64,
            width: 64,
            n_regions: 200,
            radius_min: 10.0,
            radius_max: 12.0,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_scene(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn oversized_radius_is_config_error() {
        let spec = SynthSpec {
            height: 32,
            width: 32,
            radius_min: 10.0,
            radius_max: 20.0,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_scene(&spec), Err(Error::Config(_))));
    }
}
