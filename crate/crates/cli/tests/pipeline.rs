use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
phase1_iterations = 6
phase2_iterations = 4
eval_every = 3
images_per_batch = 2

[extractor]
input_size = 16
channels = [4, 8]
embedding_dim = 8
cgnl_after_stage = 1

[sampler]
crop_size = 16
boxes_per_image = 6
"#;

fn lowshot(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lowshot")).current_dir(dir).args(args).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = lowshot(dir, args);
    assert!(
        out.status.success(),
        "lowshot {args:?} failed with {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Generates, simulates and splits a small dataset in `dir`.
fn prepare(dir: &Path) {
    fs::write(dir.join("tiny.toml"), TINY).unwrap();
    ok(
        dir,
        &[
            "generate",
            "--classes",
            "5",
            "--images",
            "16",
            "--size",
            "48",
            "--novel",
            "4",
            "--novel-weight",
            "0.6",
            "--seed",
            "3",
            "--out",
            "data",
        ],
    );
    ok(dir, &["simulate", "--manifest", "data/manifest.json", "--novel", "4", "--out", "sim"]);
    ok(dir, &["split", "--manifest", "data/manifest.json", "--novel", "4", "--k", "1", "--out", "split"]);
}

const DATA: [&str; 6] =
    ["--manifest", "data/manifest.json", "--detections", "sim/detections.json", "--split", "split/split.json"];

fn with_data(head: &[&'static str], tail: &[&'static str]) -> Vec<&'static str> {
    head.iter().chain(DATA.iter()).chain(tail.iter()).copied().collect()
}

#[test]
fn full_pipeline_runs_and_evaluation_is_repeatable() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    ok(dir, &with_data(&["--config", "tiny.toml", "--single-thread", "train", "--phase", "1"], &["--out", "p1"]));
    ok(dir, &with_data(&["--config", "tiny.toml", "imprint"], &["--checkpoint", "p1/phase1.json", "--out", "imp"]));
    ok(
        dir,
        &with_data(
            &["--config", "tiny.toml", "train", "--phase", "2"],
            &["--checkpoint", "imp/imprinted.json", "--out", "p2"],
        ),
    );
    ok(
        dir,
        &[
            "refine",
            "--manifest",
            "data/manifest.json",
            "--detections",
            "sim/detections.json",
            "--checkpoint",
            "p2/phase2.json",
            "--out",
            "ref",
        ],
    );
    let eval = |out: &'static str| {
        ok(
            dir,
            &[
                "evaluate",
                "--manifest",
                "data/manifest.json",
                "--detections",
                "ref/refined.json",
                "--split",
                "split/split.json",
                "--out",
                out,
            ],
        );
        fs::read(dir.join(out).join("report.json")).unwrap()
    };
    assert_eq!(eval("ev1"), eval("ev2"));
    ok(
        dir,
        &[
            "analyze",
            "--manifest",
            "data/manifest.json",
            "--detections",
            "ref/refined.json",
            "--novel",
            "4",
            "--out",
            "an",
        ],
    );
    for f in ["iou_histogram.csv", "oracle_curve.csv", "iou_histogram.png", "oracle_curve.png", "run.json"] {
        assert!(dir.join("an").join(f).is_file(), "missing {f}");
    }
    for d in ["data", "sim", "split", "p1", "imp", "p2", "ref", "ev1"] {
        let run: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(d).join("run.json")).unwrap()).unwrap();
        assert!(run["config_sha256"].as_str().is_some_and(|s| s.len() == 64), "{d}");
    }
}

#[test]
fn training_is_reproducible_single_threaded() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let a = with_data(&["--config", "tiny.toml", "--single-thread", "train"], &["--out", "a"]);
    let b = with_data(&["--config", "tiny.toml", "--single-thread", "train"], &["--out", "b"]);
    ok(dir, &a);
    ok(dir, &b);
    assert_eq!(fs::read(dir.join("a/phase1.json")).unwrap(), fs::read(dir.join("b/phase1.json")).unwrap());
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    let out = ok(
        dir,
        &with_data(&["--config", "tiny.toml", "train"], &["--phase1-iterations", "2", "--seed", "9", "--out", "p1"]),
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("phase1_iterations = 2"), "{stderr}");
    assert!(stderr.contains("seed = 9"), "{stderr}");
    assert!(stderr.contains("embedding_dim = 8"), "{stderr}");
}

#[test]
fn stage_order_violations_exit_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    prepare(dir);
    ok(dir, &with_data(&["--config", "tiny.toml", "train"], &["--out", "p1"]));
    let refine = lowshot(
        dir,
        &[
            "refine",
            "--manifest",
            "data/manifest.json",
            "--detections",
            "sim/detections.json",
            "--checkpoint",
            "p1/phase1.json",
            "--out",
            "r",
        ],
    );
    assert_eq!(refine.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&refine.stderr).contains("imprint"));
    let phase2 = lowshot(
        dir,
        &with_data(
            &["--config", "tiny.toml", "train", "--phase", "2"],
            &["--checkpoint", "p1/phase1.json", "--out", "p2"],
        ),
    );
    assert_eq!(phase2.status.code(), Some(1));
    let no_ckpt = lowshot(dir, &with_data(&["train", "--phase", "2"], &["--out", "p2"]));
    assert_eq!(no_ckpt.status.code(), Some(1));
}

#[test]
fn bad_input_exits_with_validation_code() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let missing = lowshot(dir, &["simulate", "--manifest", "nope.json", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(1));
    assert_eq!(lowshot(dir, &["frobnicate"]).status.code(), Some(1));
    fs::write(dir.join("bad.toml"), "phase1_iterations = \"many\"").unwrap();
    prepare(dir);
    let bad = lowshot(dir, &with_data(&["--config", "bad.toml", "train"], &["--out", "p"]));
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn refine_help_lists_flags() {
    let out = ok(Path::new("."), &["refine", "--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--manifest",
        "--detections",
        "--checkpoint",
        "--batch-size",
        "--nms-iou",
        "--out",
        "--single-thread",
        "--config",
    ] {
        assert!(text.contains(flag), "{flag} missing from\n{text}");
    }
}

#[test]
fn generate_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let args = |out: &'static str| {
        ["generate", "--classes", "4", "--images", "5", "--size", "40", "--seed", "11", "--out", out]
    };
    ok(dir, &args("a"));
    ok(dir, &args("b"));
    let files = |d: &str| -> Vec<PathBuf> {
        let mut v: Vec<_> = fs::read_dir(dir.join(d).join("images")).unwrap().map(|e| e.unwrap().path()).collect();
        v.sort();
        v
    };
    let (fa, fb) = (files("a"), files("b"));
    assert_eq!(fa.len(), 5);
    for (a, b) in fa.iter().zip(&fb) {
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }
    assert_eq!(fs::read(dir.join("a/manifest.json")).unwrap(), fs::read(dir.join("b/manifest.json")).unwrap());
}
