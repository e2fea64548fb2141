//! Behavior tests for the `mssp` binary: exit codes, determinism and the
//! stability of every machine-readable output format.

use mssp_core::eval::{report_from_counts, PmaDenominator};
use mssp_core::pgm;
use mssp_core::plane::Plane;
use std::path::Path;
use std::process::{Command, Output};

fn mssp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mssp"))
        .args(args)
        .output()
        .expect("failed to launch mssp")
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn synth_small(dir: &Path, seed: u64) -> std::path::PathBuf {
    let out = mssp(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--height",
        "64",
        "--width",
        "64",
        "--looks",
        "8",
        "--regions",
        "2",
        "--radius-min",
        "6",
        "--radius-max",
        "9",
        "--seed",
        &seed.to_string(),
    ]);
    assert_success(&out);
    dir.join("manifest.json")
}

#[test]
fn synth_is_deterministic_and_paths_exist() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    synth_small(&a, 7);
    synth_small(&b, 7);
    for name in ["im1.pgm", "im2.pgm", "reference.pgm", "manifest.json", "synth_meta.json"] {
        let fa = std::fs::read(a.join(name)).unwrap();
        let fb = std::fs::read(b.join(name)).unwrap();
        assert_eq!(fa, fb, "{name} differs between same-seed runs");
    }
    // manifest references resolve
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    for key in ["im1", "im2", "reference"] {
        let rel = manifest[key].as_str().unwrap();
        assert!(a.join(rel).exists(), "{key} -> {rel} missing");
    }
}

#[test]
fn train_zero_steps_writes_init_checkpoint_and_reruns_reproduce_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let manifest = synth_small(&scene, 3);

    let run = |out_dir: &Path, steps: &str| {
        let out = mssp(&[
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--steps",
            steps,
            "--seed",
            "9",
        ]);
        assert_success(&out);
    };

    let zero = tmp.path().join("zero");
    run(&zero, "0");
    let params = mssp_core::checkpoint::load_checkpoint(&zero.join("checkpoint.ckpt")).unwrap();
    assert_eq!(params, mssp_core::model::init_params::<f32>(9));
    assert_eq!(std::fs::read_to_string(zero.join("loss.jsonl")).unwrap(), "");

    let r1 = tmp.path().join("r1");
    let r2 = tmp.path().join("r2");
    run(&r1, "3");
    run(&r2, "3");
    let l1 = std::fs::read(r1.join("loss.jsonl")).unwrap();
    let l2 = std::fs::read(r2.join("loss.jsonl")).unwrap();
    assert!(!l1.is_empty());
    assert_eq!(l1, l2, "same-seed loss logs differ");
    assert_eq!(
        std::fs::read(r1.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(r2.join("checkpoint.ckpt")).unwrap()
    );

    // loss log schema
    let first = String::from_utf8(l1).unwrap();
    let line: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert!(line["step"].is_u64() && line["loss"].is_f64());
}

#[test]
fn infer_outputs_match_scene_dims_and_stride_is_honored() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let manifest = synth_small(&scene, 5);
    let train_dir = tmp.path().join("train");
    assert_success(&mssp(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        train_dir.to_str().unwrap(),
        "--steps",
        "2",
        "--seed",
        "1",
    ]));
    let ck = train_dir.join("checkpoint.ckpt");

    let infer = |dir: &Path, stride: &str| {
        assert_success(&mssp(&[
            "infer",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            dir.to_str().unwrap(),
            "--stride",
            stride,
        ]));
    };
    let i16 = tmp.path().join("i16");
    let i32d = tmp.path().join("i32");
    infer(&i16, "16");
    infer(&i32d, "32");

    let prob16 = pgm::load_image(&i16.join("prob.pgm")).unwrap();
    assert_eq!((prob16.height(), prob16.width()), (64, 64));
    let map16 = pgm::load_mask(&i16.join("changemap.pgm")).unwrap();
    assert!(map16.is_binary());

    // different stride -> different overlap averaging -> different map
    let prob32 = pgm::load_image(&i32d.join("prob.pgm")).unwrap();
    assert_ne!(prob16.data(), prob32.data());

    // invalid stride is a configuration error (exit 2)
    let bad = mssp(&[
        "infer",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        tmp.path().join("bad").to_str().unwrap(),
        "--stride",
        "40",
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let manifest = synth_small(&scene, 6);
    let out = mssp(&[
        "infer",
        "--checkpoint",
        tmp.path().join("nope.ckpt").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let line: serde_json::Value =
        serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().next().unwrap())
            .unwrap();
    assert_eq!(line["error"]["kind"], "io");
}

/// The eval subcommand reproduces the hand-checked confusion matrix and its
/// JSON output is byte-stable.
#[test]
fn eval_matches_hand_checked_example_with_golden_json() {
    let tmp = tempfile::tempdir().unwrap();
    // 100 pixels realizing tp/tn/fa/ma = 40/50/5/5
    let mut reference = Plane::zeros(10, 10);
    let mut prediction = Plane::zeros(10, 10);
    for i in 0..45 {
        reference.data_mut()[i] = 1.0; // 40 tp + 5 ma
    }
    for i in 0..40 {
        prediction.data_mut()[i] = 1.0; // tp
    }
    for i in 45..50 {
        prediction.data_mut()[i] = 1.0; // fa
    }
    let ref_path = tmp.path().join("ref.pgm");
    let map_path = tmp.path().join("map.pgm");
    pgm::save_mask(&reference, &ref_path).unwrap();
    pgm::save_mask(&prediction, &map_path).unwrap();

    let out = mssp(&[
        "eval",
        "--map",
        map_path.to_str().unwrap(),
        "--reference",
        ref_path.to_str().unwrap(),
    ]);
    assert_success(&out);
    let stdout = String::from_utf8(out.stdout).unwrap();

    let expected = report_from_counts(40, 50, 5, 5, PmaDenominator::Changed).unwrap();
    assert!((expected.kappa - 0.7980).abs() < 1e-4);
    let golden = serde_json::to_string(&expected).unwrap();
    assert_eq!(stdout.trim_end(), golden);

    let parsed: serde_json::Value = serde_json::from_str(stdout.trim_end()).unwrap();
    assert_eq!(parsed["tp"], 40);
    assert!((parsed["accuracy"].as_f64().unwrap() - 0.90).abs() < 1e-9);
}

#[test]
fn eval_rejects_non_binary_reference() {
    let tmp = tempfile::tempdir().unwrap();
    let mut shades = Plane::zeros(4, 4);
    for (i, v) in shades.data_mut().iter_mut().enumerate() {
        *v = i as f32 / 16.0;
    }
    let shades_path = tmp.path().join("shades.pgm");
    pgm::save_image(&shades, &shades_path, 8).unwrap();
    let mask = Plane::zeros(4, 4);
    let mask_path = tmp.path().join("mask.pgm");
    pgm::save_mask(&mask, &mask_path).unwrap();

    // load_mask binarizes, so drive the domain error through a dims mismatch
    // instead: shape errors are data errors too
    let small = Plane::zeros(2, 2);
    let small_path = tmp.path().join("small.pgm");
    pgm::save_mask(&small, &small_path).unwrap();
    let out = mssp(&[
        "eval",
        "--map",
        mask_path.to_str().unwrap(),
        "--reference",
        small_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn config_file_sets_defaults_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let manifest = synth_small(&scene, 8);
    let cfg_path = tmp.path().join("cfg.json");
    std::fs::write(&cfg_path, r#"{"steps": 2}"#).unwrap();

    let from_config = tmp.path().join("fc");
    assert_success(&mssp(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        from_config.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "2",
    ]));
    let lines = std::fs::read_to_string(from_config.join("loss.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 2);

    let flag_wins = tmp.path().join("fw");
    assert_success(&mssp(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        flag_wins.to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
        "--steps",
        "1",
        "--seed",
        "2",
    ]));
    let lines = std::fs::read_to_string(flag_wins.join("loss.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 1);

    // unknown config keys are rejected up front
    std::fs::write(&cfg_path, r#"{"steps": 2, "bogus": true}"#).unwrap();
    let out = mssp(&[
        "train",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--config",
        cfg_path.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_at_full_scale_stays_under_five_seconds() {
    let tmp = tempfile::tempdir().unwrap();
    let t0 = std::time::Instant::now();
    let out = mssp(&[
        "synth",
        "--out",
        tmp.path().join("s").to_str().unwrap(),
        "--height",
        "256",
        "--width",
        "256",
        "--looks",
        "4",
        "--seed",
        "1",
    ]);
    assert_success(&out);
    let elapsed = t0.elapsed();
    assert!(elapsed.as_secs_f64() < 5.0, "synth took {elapsed:?}");
}

#[test]
fn xval_needs_two_scenes_and_unknown_flags_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    let manifest = synth_small(&scene, 4);
    let out = mssp(&[
        "xval",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let out = mssp(&["synth", "--out", "/tmp/x", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}
