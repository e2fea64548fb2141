//! Whole-scene inference by tiled patches with stitched probabilities.
//!
//! 32x32 tiles are taken at the given stride (edge tiles read replicated
//! pixels so every position is covered), run through eval-mode forward, and
//! the per-pixel changed-class probabilities of overlapping tiles are
//! averaged before thresholding at 0.5 (ties count as changed).

use crate::error::{Error, Result};
use crate::layers::softmax2;
use crate::model::{forward_eval, ModelConfig, ModelParams, IN_CHANNELS, PATCH};
use crate::plane::Plane;
use crate::sampling::crop_patch;
use crate::scene::ScenePair;
use crate::tensor::Tensor;

pub const DEFAULT_STRIDE: usize = 16;

/// Stitched whole-scene result: per-pixel changed probability and the
/// thresholded binary map (`labels = prob >= 0.5`).
#[derive(Clone, Debug)]
pub struct ChangeMap {
    pub prob: Plane,
    pub labels: Plane,
}

fn tile_origins(extent: usize, stride: usize) -> Vec<usize> {
    (0..extent).step_by(stride).collect()
}

pub fn infer_scene(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    scene: &ScenePair,
    stride: usize,
) -> Result<ChangeMap> {
    if !(1..=PATCH).contains(&stride) {
        return Err(Error::config(format!(
            "stride must lie in 1..={PATCH}, got {stride}"
        )));
    }
    if !scene.is_prepared() {
        return Err(Error::config("scene not prepared (call prepare first)"));
    }
    let channels = scene.channels()?;
    let (h, w) = (scene.height(), scene.width());

    let mut origins = Vec::new();
    for r0 in tile_origins(h, stride) {
        for c0 in tile_origins(w, stride) {
            origins.push((r0, c0));
        }
    }

    let mut sum = vec![0.0f64; h * w];
    let mut count = vec![0u32; h * w];
    // forward in chunks; accumulation stays in tile order for determinism
    for chunk in origins.chunks(32) {
        let mut data = Vec::with_capacity(chunk.len() * PATCH * PATCH * IN_CHANNELS);
        for &(r0, c0) in chunk {
            data.extend_from_slice(&crop_patch(&channels, r0 as isize, c0 as isize));
        }
        let batch = Tensor::from_vec(&[chunk.len(), PATCH, PATCH, IN_CHANNELS], data)?;
        let (logits, _) = forward_eval(params, cfg, &batch)?;
        let probs = softmax2(&logits)?;
        for (t, &(r0, c0)) in chunk.iter().enumerate() {
            for dr in 0..PATCH {
                let r = r0 + dr;
                if r >= h {
                    break;
                }
                for dc in 0..PATCH {
                    let c = c0 + dc;
                    if c >= w {
                        break;
                    }
                    let p = probs.at(&[t, dr, dc, 1]) as f64;
                    sum[r * w + c] += p;
                    count[r * w + c] += 1;
                }
            }
        }
    }

    let mut prob = Plane::zeros(h, w);
    let mut labels = Plane::zeros(h, w);
    for i in 0..h * w {
        debug_assert!(count[i] > 0, "stitching left pixel {i} uncovered");
        let p = (sum[i] / count[i] as f64) as f32;
        prob.data_mut()[i] = p;
        labels.data_mut()[i] = if p >= 0.5 { 1.0 } else { 0.0 };
    }
    Ok(ChangeMap { prob, labels })
}
