//! Scene pairs and their on-disk manifest.
//!
//! A scene holds two co-registered amplitude images, an optional reference
//! change mask (1 = changed) and, after [`ScenePair::prepare`], the derived
//! difference image plus the per-scene min-max constants used to normalize
//! the three network input channels.

use crate::di;
use crate::error::{Error, Result};
use crate::pgm;
use crate::plane::Plane;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Per-scene channel normalization constants, recorded at preparation time
/// so inference reuses exactly the constants training saw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneNorm {
    pub im1_min: f32,
    pub im1_max: f32,
    pub im2_min: f32,
    pub im2_max: f32,
}

#[derive(Clone, Debug)]
pub struct ScenePair {
    pub name: String,
    pub im1: Plane,
    pub im2: Plane,
    pub di: Option<Plane>,
    pub reference: Option<Plane>,
    pub norm: Option<SceneNorm>,
}

impl ScenePair {
    pub fn new(
        name: impl Into<String>,
        im1: Plane,
        im2: Plane,
        reference: Option<Plane>,
    ) -> Result<Self> {
        if !im1.same_dims(&im2) {
            return Err(Error::shape("scene images must share dims"));
        }
        for (label, im) in [("im1", &im1), ("im2", &im2)] {
            if im.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::domain(format!("{label} has negative amplitudes")));
            }
        }
        if let Some(r) = &reference {
            if !r.same_dims(&im1) {
                return Err(Error::shape("reference mask dims differ from images"));
            }
            if !r.is_binary() {
                return Err(Error::domain("reference mask is not binary"));
            }
        }
        Ok(ScenePair {
            name: name.into(),
            im1,
            im2,
            di: None,
            reference: None.or(reference),
            norm: None,
        })
    }

    pub fn height(&self) -> usize {
        self.im1.height()
    }

    pub fn width(&self) -> usize {
        self.im1.width()
    }

    pub fn is_prepared(&self) -> bool {
        self.di.is_some() && self.norm.is_some()
    }

    /// Computes the difference image and the channel normalization constants.
    pub fn prepare(&mut self, window: usize, epsilon: f32) -> Result<()> {
        let di = di::generate_di(&self.im1, &self.im2, window, epsilon)?;
        let (im1_min, im1_max) = self.im1.min_max();
        let (im2_min, im2_max) = self.im2.min_max();
        self.norm = Some(SceneNorm {
            im1_min,
            im1_max,
            im2_min,
            im2_max,
        });
        self.di = Some(di);
        Ok(())
    }

    /// The three normalized input channels (im1, im2, di), each in [0, 1].
    pub fn channels(&self) -> Result<[Plane; 3]> {
        let norm = self
            .norm
            .ok_or_else(|| Error::config("scene not prepared (call prepare first)"))?;
        let di = self
            .di
            .clone()
            .ok_or_else(|| Error::config("scene not prepared (call prepare first)"))?;
        let rescale = |im: &Plane, lo: f32, hi: f32| {
            let span = hi - lo;
            let data = if span > 0.0 {
                im.data().iter().map(|&v| (v - lo) / span).collect()
            } else {
                vec![0.0; im.len()]
            };
            Plane::from_vec(im.height(), im.width(), data)
        };
        Ok([
            rescale(&self.im1, norm.im1_min, norm.im1_max)?,
            rescale(&self.im2, norm.im2_min, norm.im2_max)?,
            di,
        ])
    }
}

/// On-disk scene description; image paths are relative to the manifest file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub name: String,
    pub im1: String,
    pub im2: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
}

pub fn load_manifest(path: &Path) -> Result<ScenePair> {
    let text = std::fs::read_to_string(path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let im1 = pgm::load_image(&base.join(&manifest.im1))?;
    let im2 = pgm::load_image(&base.join(&manifest.im2))?;
    let reference = manifest
        .reference
        .as_ref()
        .map(|r| pgm::load_mask(&base.join(r)))
        .transpose()?;
    ScenePair::new(manifest.name, im1, im2, reference)
}

/// Writes im1/im2 (16-bit, jointly scaled so their ratio structure is
/// preserved), the reference mask if present, and `manifest.json`.
/// Returns the manifest path.
pub fn save_scene(scene: &ScenePair, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let joint_max = scene.im1.min_max().1.max(scene.im2.min_max().1);
    let scale = if joint_max > 0.0 { 1.0 / joint_max } else { 1.0 };
    let scaled = |im: &Plane| {
        Plane::from_vec(
            im.height(),
            im.width(),
            im.data().iter().map(|&v| v * scale).collect(),
        )
        .unwrap()
    };
    pgm::save_image(&scaled(&scene.im1), &dir.join("im1.pgm"), 16)?;
    pgm::save_image(&scaled(&scene.im2), &dir.join("im2.pgm"), 16)?;
    let reference = scene.reference.as_ref().map(|r| {
        pgm::save_mask(r, &dir.join("reference.pgm")).map(|()| "reference.pgm".to_string())
    });
    let manifest = Manifest {
        name: scene.name.clone(),
        im1: "im1.pgm".into(),
        im2: "im2.pgm".into(),
        reference: reference.transpose()?,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp_scene() -> ScenePair {
        let mut im1 = Plane::zeros(40, 40);
        let mut im2 = Plane::zeros(40, 40);
        for i in 0..1600 {
            im1.data_mut()[i] = 1.0 + (i % 7) as f32;
            im2.data_mut()[i] = 2.0 + (i % 5) as f32;
        }
        let mut reference = Plane::zeros(40, 40);
        for r in 10..20 {
            for c in 10..20 {
                reference.set(r, c, 1.0);
            }
        }
        ScenePair::new("ramp", im1, im2, Some(reference)).unwrap()
    }

    #[test]
    fn prepare_fills_di_and_norm() {
        let mut scene = ramp_scene();
        assert!(!scene.is_prepared());
        scene.prepare(3, 1e-6).unwrap();
        assert!(scene.is_prepared());
        let [c1, c2, d] = scene.channels().unwrap();
        for p in [&c1, &c2, &d] {
            assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn unprepared_channels_is_config_error() {
        let scene = ramp_scene();
        assert!(matches!(scene.channels(), Err(Error::Config(_))));
    }

    #[test]
    fn manifest_round_trip_preserves_di_structure() {
        let dir = tempfile::tempdir().unwrap();
        let mut scene = ramp_scene();
        let path = save_scene(&scene, dir.path()).unwrap();
        let mut loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.name, "ramp");
        assert_eq!(loaded.reference.as_ref().unwrap(), scene.reference.as_ref().unwrap());

        scene.prepare(3, 1e-6).unwrap();
        loaded.prepare(3, 1e-6).unwrap();
        // joint 16-bit storage keeps the normalized DI close
        let a = scene.di.as_ref().unwrap();
        let b = loaded.di.as_ref().unwrap();
        let max_err = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err < 5e-3, "max DI error {max_err}");
    }

    #[test]
    fn unknown_manifest_keys_rejected() {
        let bad = r#"{"name":"x","im1":"a.pgm","im2":"b.pgm","bogus":1}"#;
        assert!(serde_json::from_str::<Manifest>(bad).is_err());
    }
}
