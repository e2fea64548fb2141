//! Cross-scene generalization harness: train on a pool of scenes, evaluate
//! on a held-out scene, and rotate (leave-one-out).

use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::infer::infer_scene;
use crate::model::{init_params, ModelConfig, ModelParams};
use crate::optim::{train_loop, LossRecord, TrainConfig};
use crate::sampling::{sample_patches, PatchBatch, SampleSpec};
use crate::scene::ScenePair;
use std::path::{Path, PathBuf};

/// Result of one fold: the held-out report, the trained checkpoint path (if
/// requested), the loss history and the provenance audit outcome.
#[derive(Debug)]
pub struct FoldOutcome {
    pub test_scene: String,
    pub report: EvalReport,
    pub checkpoint: Option<PathBuf>,
    pub history: Vec<LossRecord>,
    /// True when no training patch originated from the held-out scene;
    /// asserted during pooling.
    pub audit_clean: bool,
}

/// Pools patches from the training scenes, tagging each patch with its
/// source scene so the held-out audit can verify provenance.
fn pool_patches(
    train_scenes: &[&ScenePair],
    sample: &SampleSpec,
) -> Result<(PatchBatch, Vec<String>)> {
    let mut batches = Vec::with_capacity(train_scenes.len());
    let mut provenance = Vec::new();
    for (i, scene) in train_scenes.iter().enumerate() {
        let spec = SampleSpec {
            seed: sample.seed.wrapping_add(i as u64),
            ..*sample
        };
        let result = sample_patches(scene, &spec)?;
        provenance.extend(std::iter::repeat_n(scene.name.clone(), result.batch.len()));
        batches.push(result.batch);
    }
    Ok((PatchBatch::concat(&batches)?, provenance))
}

/// Trains one model on the pooled training scenes and evaluates the held-out
/// scene over all of its pixels (nothing from it was trained on, so no
/// exclusion mask applies).
pub fn cross_dataset_eval(
    train_scenes: &[&ScenePair],
    test_scene: &ScenePair,
    sample: &SampleSpec,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    stride: usize,
    checkpoint_out: Option<&Path>,
) -> Result<FoldOutcome> {
    if train_scenes.is_empty() {
        return Err(Error::config("need at least one training scene"));
    }
    let mut names: Vec<&str> = train_scenes.iter().map(|s| s.name.as_str()).collect();
    names.push(&test_scene.name);
    names.sort_unstable();
    if names.windows(2).any(|p| p[0] == p[1]) {
        return Err(Error::config("scene names must be unique for the audit"));
    }
    if test_scene.reference.is_none() {
        return Err(Error::config("held-out scene needs a reference mask"));
    }

    let (pool, provenance) = pool_patches(train_scenes, sample)?;
    let audit_clean = provenance.iter().all(|name| name != &test_scene.name);
    assert!(audit_clean, "a held-out pixel entered the training pool");

    let mut params: ModelParams<f32> = init_params(train_cfg.seed);
    let history = train_loop(&mut params, model_cfg, &pool, train_cfg)?;

    let checkpoint = match checkpoint_out {
        Some(path) => {
            save_checkpoint(&params, path)?;
            Some(path.to_path_buf())
        }
        None => None,
    };

    let map = infer_scene(&params, model_cfg, test_scene, stride)?;
    let report = evaluate(&map.labels, test_scene.reference.as_ref().unwrap(), None)?;
    Ok(FoldOutcome {
        test_scene: test_scene.name.clone(),
        report,
        checkpoint,
        history,
        audit_clean,
    })
}

/// Leave-one-out over the given scenes: each scene is held out once, the
/// rest form the training pool. Emits one outcome per scene in input order.
pub fn leave_one_out(
    scenes: &[ScenePair],
    sample: &SampleSpec,
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    stride: usize,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<FoldOutcome>> {
    if scenes.len() < 2 {
        return Err(Error::config("leave-one-out needs at least two scenes"));
    }
    let mut outcomes = Vec::with_capacity(scenes.len());
    for (k, test_scene) in scenes.iter().enumerate() {
        let train: Vec<&ScenePair> = scenes
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != k)
            .map(|(_, s)| s)
            .collect();
        let ck_path = checkpoint_dir.map(|d| d.join(format!("fold{k}.ckpt")));
        outcomes.push(cross_dataset_eval(
            &train,
            test_scene,
            sample,
            train_cfg,
            model_cfg,
            stride,
            ck_path.as_deref(),
        )?);
    }
    Ok(outcomes)
}
