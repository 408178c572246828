//! Black-box tests of the `twostage` binary: exit codes, output formats,
//! and determinism of the command workflow.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_twostage"))
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("twostage_cli_{name}"));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().unwrap();
    assert!(
        out.status.success(),
        "command failed: {:?}\nstderr: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Micro training settings shared by the CLI tests: fast, still functional.
const MICRO: &[&str] = &[
    "--set", "pretrain_epochs=1",
    "--set", "pretrain_pos_per_image=2",
    "--set", "pretrain_neg_per_image=2",
    "--set", "finetune_epochs=1",
    "--set", "rpn_epochs=1",
    "--set", "det_epochs=1",
    "--set", "rpn_finetune_epochs=1",
    "--set", "det_finetune_epochs=1",
    "--set", "svm_max_epochs=40",
];

fn synth(dir: &Path, n: usize, seed: u64) {
    run_ok(bin().args([
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
    ]));
}

#[test]
fn synth_writes_dataset_and_is_deterministic() {
    let d1 = tmp("synth1");
    let d2 = tmp("synth2");
    synth(&d1, 10, 7);
    synth(&d2, 10, 7);

    let ppms: Vec<_> = fs::read_dir(&d1)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ppm"))
        .collect();
    assert_eq!(ppms.len(), 10);
    assert!(d1.join("dataset.csv").exists());

    for name in ["dataset.csv", "img_0000.ppm", "img_0009.ppm"] {
        assert_eq!(
            fs::read(d1.join(name)).unwrap(),
            fs::read(d2.join(name)).unwrap(),
            "{name} differs between identical-seed runs"
        );
    }
}

#[test]
fn synth_unwritable_dir_exits_1() {
    // A path under an existing *file* cannot be created.
    let out = bin()
        .args(["synth", "--out", "/proc/version/sub", "--n", "2", "--seed", "1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn train_unknown_method_exits_2() {
    let out = bin()
        .args(["train", "--method", "yolo", "--data", "x.csv", "--out", "m.tsd"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_unknown_config_key_exits_2() {
    let d = tmp("badkey");
    synth(&d, 4, 1);
    let out = bin()
        .args([
            "train",
            "--method",
            "rcnn",
            "--data",
            d.join("dataset.csv").to_str().unwrap(),
            "--out",
            d.join("m.tsd").to_str().unwrap(),
            "--set",
            "no_such_key=1",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn print_config_dumps_effective_values() {
    let out = run_ok(bin().args([
        "train",
        "--method",
        "rcnn",
        "--data",
        "unused.csv",
        "--out",
        "unused.tsd",
        "--set",
        "seed=123",
        "--print-config",
    ]));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 123\n"));
    assert!(text.contains("ridge_lambda = 1000\n"));
    assert!(text.lines().count() > 40);
}

#[test]
fn full_cli_workflow_rcnn_and_faster() {
    let d = tmp("workflow");
    synth(&d, 16, 3);
    let data = d.join("dataset.csv");

    // Train both methods with micro settings.
    let rcnn_model = d.join("rcnn.tsd");
    run_ok(bin().args([
        "train", "--method", "rcnn",
        "--data", data.to_str().unwrap(),
        "--out", rcnn_model.to_str().unwrap(),
    ]).args(MICRO));
    assert!(rcnn_model.exists());

    let faster_model = d.join("faster.tsd");
    run_ok(bin().args([
        "train", "--method", "faster-rcnn",
        "--data", data.to_str().unwrap(),
        "--out", faster_model.to_str().unwrap(),
    ]).args(MICRO));

    // The faster-rcnn training log carries exactly 4 stage banners.
    let log = fs::read_to_string(d.join("faster.tsd.log")).unwrap();
    let banners = log.lines().filter(|l| l.contains("step") && l.contains("/4:")).count();
    assert_eq!(banners, 4, "log:\n{log}");

    // Detect on one image: each stdout line is `class score x y w h`.
    let image = d.join("img_0000.ppm");
    let overlay = d.join("overlay.svg");
    let out = run_ok(bin().args([
        "detect",
        "--model", rcnn_model.to_str().unwrap(),
        "--image", image.to_str().unwrap(),
        "--dump-boxes", overlay.to_str().unwrap(),
    ]));
    let stdout = String::from_utf8(out.stdout).unwrap();
    for line in stdout.lines() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 6, "bad detect line `{line}`");
        fields[0].parse::<usize>().unwrap();
        for f in &fields[1..] {
            f.parse::<f64>().unwrap();
        }
    }
    let svg = fs::read_to_string(&overlay).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));

    // Evaluate: report has a map in [0,1]; identical rerun gives identical
    // report bytes (timing lives in a separate file).
    let eval1 = d.join("eval1");
    run_ok(bin().args([
        "eval",
        "--model", rcnn_model.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--split", "test",
        "--out", eval1.to_str().unwrap(),
    ]));
    let report = fs::read_to_string(eval1.join("report.txt")).unwrap();
    let map_line = report.lines().find(|l| l.starts_with("map = ")).unwrap();
    let map: f64 = map_line.trim_start_matches("map = ").parse().unwrap();
    assert!((0.0..=1.0).contains(&map));

    let eval2 = d.join("eval2");
    run_ok(bin().args([
        "eval",
        "--model", rcnn_model.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
        "--split", "test",
        "--out", eval2.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(eval1.join("report.txt")).unwrap(),
        fs::read(eval2.join("report.txt")).unwrap(),
        "eval reports must be byte-identical across reruns"
    );

    // Bench: two labeled rows with numeric columns; same model on both
    // sides gives identical mAP values.
    let out = run_ok(bin().args([
        "bench",
        "--model-a", rcnn_model.to_str().unwrap(),
        "--model-b", rcnn_model.to_str().unwrap(),
        "--data", data.to_str().unwrap(),
    ]));
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 3, "bench output:\n{table}");
    assert!(rows[0].contains("method") && rows[0].contains("mAP"));
    let parse_row = |row: &str| -> (String, f64, f64) {
        let f: Vec<&str> = row.split_whitespace().collect();
        (f[0].to_string(), f[1].parse().unwrap(), f[2].parse().unwrap())
    };
    let (name_a, map_a, _) = parse_row(rows[1]);
    let (name_b, map_b, _) = parse_row(rows[2]);
    assert_eq!(name_a, "rcnn");
    assert_eq!(name_b, "rcnn");
    assert_eq!(map_a, map_b);
}

#[test]
fn detect_missing_model_exits_1() {
    let out = bin()
        .args(["detect", "--model", "/nonexistent/m.tsd", "--image", "/nonexistent/i.ppm"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_is_byte_deterministic() {
    let d = tmp("train_det");
    synth(&d, 8, 9);
    let data = d.join("dataset.csv");
    for name in ["a.tsd", "b.tsd"] {
        run_ok(bin().args([
            "train", "--method", "faster-rcnn",
            "--data", data.to_str().unwrap(),
            "--out", d.join(name).to_str().unwrap(),
            "--set", "seed=5",
        ]).args(MICRO));
    }
    assert_eq!(
        fs::read(d.join("a.tsd")).unwrap(),
        fs::read(d.join("b.tsd")).unwrap(),
        "identical config/seed must produce byte-identical model files"
    );
}
