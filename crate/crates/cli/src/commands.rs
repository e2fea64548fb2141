//! Command implementations.

use crate::{Command, TrainOpts};
use mssp_core::checkpoint::{load_checkpoint, save_checkpoint};
use mssp_core::error::{Error, Result};
use mssp_core::eval::{evaluate_with, PmaDenominator};
use mssp_core::infer::infer_scene;
use mssp_core::model::{init_params, ModelConfig, SpPool};
use mssp_core::optim::{train_loop, LossRecord, TrainConfig};
use mssp_core::pgm;
use mssp_core::sampling::{sample_patches, PatchBatch, SampleSpec};
use mssp_core::scene::{load_manifest, save_scene, ScenePair};
use mssp_core::synth::{synth_scene, SynthSpec};
use mssp_core::xval::leave_one_out;
use serde::Deserialize;
use std::io::Write;
use std::path::Path;

/// Defaults file for the training flags; explicit flags win.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    steps: Option<usize>,
    batch: Option<usize>,
    lr: Option<f64>,
    fraction: Option<f64>,
    boundary_share: Option<f64>,
    boundary_band: Option<usize>,
    window: Option<usize>,
    sp_pool: Option<String>,
}

struct Resolved {
    steps: usize,
    batch: usize,
    lr: f64,
    fraction: f64,
    boundary_share: f64,
    boundary_band: usize,
    window: usize,
    sp_pool: SpPool,
}

fn parse_sp_pool(s: &str) -> Result<SpPool> {
    match s {
        "avg" => Ok(SpPool::Avg),
        "max" => Ok(SpPool::Max),
        other => Err(Error::config(format!(
            "sp_pool must be 'avg' or 'max', got '{other}'"
        ))),
    }
}

fn resolve(opts: &TrainOpts) -> Result<Resolved> {
    let file: FileConfig = match &opts.config {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::config(format!("config file {}: {e}", path.display())))?,
        None => FileConfig::default(),
    };
    let resolved = Resolved {
        steps: opts.steps.or(file.steps).unwrap_or(3000),
        batch: opts.batch.or(file.batch).unwrap_or(8),
        lr: opts.lr.or(file.lr).unwrap_or(0.005),
        fraction: opts.fraction.or(file.fraction).unwrap_or(0.2),
        boundary_share: opts.boundary_share.or(file.boundary_share).unwrap_or(0.5),
        boundary_band: opts.boundary_band.or(file.boundary_band).unwrap_or(2),
        window: opts.window.or(file.window).unwrap_or(3),
        sp_pool: parse_sp_pool(
            opts.sp_pool
                .as_deref()
                .or(file.sp_pool.as_deref())
                .unwrap_or("avg"),
        )?,
    };
    if resolved.window == 0 || resolved.window % 2 == 0 {
        return Err(Error::config("window must be odd"));
    }
    Ok(resolved)
}

fn load_prepared(path: &Path, window: usize) -> Result<ScenePair> {
    let mut scene = load_manifest(path)?;
    scene.prepare(window, mssp_core::di::DEFAULT_EPSILON)?;
    Ok(scene)
}

fn write_loss_log(path: &Path, history: &[LossRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    for record in history {
        writeln!(f, "{}", serde_json::to_string(record)?)?;
    }
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            height,
            width,
            looks,
            regions,
            radius_min,
            radius_max,
            contrast,
            seed,
            name,
        } => {
            let spec = SynthSpec {
                height,
                width,
                looks,
                n_regions: regions,
                radius_min,
                radius_max,
                contrast,
                seed,
            };
            let (mut scene, meta) = synth_scene(&spec)?;
            if let Some(name) = name {
                scene.name = name;
            }
            let manifest = save_scene(&scene, &out)?;
            std::fs::write(
                out.join("synth_meta.json"),
                serde_json::to_string_pretty(&meta)?,
            )?;
            println!("{}", manifest.display());
            Ok(())
        }

        Command::Train {
            manifest,
            out,
            seed,
            opts,
        } => {
            let r = resolve(&opts)?;
            std::fs::create_dir_all(&out)?;
            let mut batches = Vec::new();
            for (i, path) in manifest.iter().enumerate() {
                let scene = load_prepared(path, r.window)?;
                let spec = SampleSpec {
                    fraction: r.fraction,
                    boundary_share: r.boundary_share,
                    boundary_band: r.boundary_band,
                    seed: seed.wrapping_add(i as u64),
                };
                let result = sample_patches(&scene, &spec)?;
                pgm::save_mask(
                    &result.center_mask,
                    &out.join(format!("centers_{}.pgm", scene.name)),
                )?;
                batches.push(result.batch);
            }
            let pool = PatchBatch::concat(&batches)?;

            let mut params = init_params(seed);
            let model_cfg = ModelConfig {
                sp_pool: r.sp_pool,
                ..ModelConfig::default()
            };
            let train_cfg = TrainConfig {
                steps: r.steps,
                batch: r.batch,
                lr: r.lr,
                seed,
            };
            let history = train_loop(&mut params, &model_cfg, &pool, &train_cfg)?;
            save_checkpoint(&params, &out.join("checkpoint.ckpt"))?;
            write_loss_log(&out.join("loss.jsonl"), &history)?;
            Ok(())
        }

        Command::Infer {
            checkpoint,
            manifest,
            out,
            stride,
            window,
            sp_pool,
        } => {
            let params = load_checkpoint(&checkpoint)?;
            let scene = load_prepared(&manifest, window)?;
            let model_cfg = ModelConfig {
                sp_pool: parse_sp_pool(&sp_pool)?,
                ..ModelConfig::default()
            };
            let map = infer_scene(&params, &model_cfg, &scene, stride)?;
            std::fs::create_dir_all(&out)?;
            pgm::save_mask(&map.labels, &out.join("changemap.pgm"))?;
            pgm::save_image(&map.prob, &out.join("prob.pgm"), 16)?;
            Ok(())
        }

        Command::Eval {
            map,
            reference,
            exclude,
            pma_denominator,
        } => {
            let prediction = pgm::load_mask(&map)?;
            let reference = pgm::load_mask(&reference)?;
            let exclude = exclude.map(|p| pgm::load_mask(&p)).transpose()?;
            let denom = match pma_denominator.as_str() {
                "changed" => PmaDenominator::Changed,
                "unchanged" => PmaDenominator::Unchanged,
                other => {
                    return Err(Error::config(format!(
                        "pma_denominator must be 'changed' or 'unchanged', got '{other}'"
                    )))
                }
            };
            let report = evaluate_with(&prediction, &reference, exclude.as_ref(), denom)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }

        Command::Xval {
            manifest,
            out,
            seed,
            stride,
            opts,
        } => {
            let r = resolve(&opts)?;
            if manifest.len() < 2 {
                return Err(Error::config("xval needs at least two manifests"));
            }
            std::fs::create_dir_all(&out)?;
            let scenes: Vec<ScenePair> = manifest
                .iter()
                .map(|p| load_prepared(p, r.window))
                .collect::<Result<_>>()?;
            let sample = SampleSpec {
                fraction: r.fraction,
                boundary_share: r.boundary_share,
                boundary_band: r.boundary_band,
                seed,
            };
            let model_cfg = ModelConfig {
                sp_pool: r.sp_pool,
                ..ModelConfig::default()
            };
            let train_cfg = TrainConfig {
                steps: r.steps,
                batch: r.batch,
                lr: r.lr,
                seed,
            };
            let outcomes = leave_one_out(&scenes, &sample, &train_cfg, &model_cfg, stride, Some(&out))?;

            let mut summary = Vec::new();
            println!("{:<20} {:>9} {:>9} {:>9} {:>9}", "scene", "accuracy", "pfa", "pma", "kappa");
            for (k, outcome) in outcomes.iter().enumerate() {
                let report_path = out.join(format!("fold{k}_report.json"));
                std::fs::write(&report_path, serde_json::to_string(&outcome.report)?)?;
                write_loss_log(&out.join(format!("fold{k}_loss.jsonl")), &outcome.history)?;
                println!(
                    "{:<20} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                    outcome.test_scene,
                    outcome.report.accuracy,
                    outcome.report.pfa,
                    outcome.report.pma,
                    outcome.report.kappa
                );
                summary.push(serde_json::json!({
                    "scene": outcome.test_scene,
                    "audit_clean": outcome.audit_clean,
                    "report": outcome.report,
                }));
            }
            std::fs::write(
                out.join("summary.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            Ok(())
        }
    }
}
