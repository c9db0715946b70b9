use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_classsr"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "paths": {"workdir": dir.join("work")},
        "training": {
            "seed": 3,
            "eval_interval": 1000,
            "pretrain": {"iterations": 2, "batch_size": 2},
            "classifier": {"iterations": 2, "batch_size": 6},
            "joint": {"iterations": 1, "batch_size": 6}
        },
        "data": {
            "hr_scales": [1.0],
            "train_stride": 32,
            "synth": {"n_flat": 1, "n_texture": 1, "n_edge": 1, "size": 128, "seed": 1},
            "synth_validation": {"n_flat": 1, "n_texture": 1, "size": 128, "seed": 2}
        }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

#[test]
fn usage_errors_exit_with_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["train", "--stage", "warmup"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"widths": [56, 16]}}"#).unwrap();
    assert_eq!(run(&["prepare", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    std::fs::write(&bad, r#"{"unknown": 1}"#).unwrap();
    assert_eq!(run(&["prepare", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn missing_prerequisite_names_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = run(&["train", "--config", cfg.to_str().unwrap(), "--stage", "classifier"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pretrain.ckpt"), "{err}");
}

#[test]
fn full_pipeline_and_forced_inference() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let c = cfg.to_str().unwrap();

    let prep = stdout_json(&run(&["prepare", "--config", c]));
    assert!(prep["tiles"].as_u64().unwrap() > 0);
    for stage in ["pretrain", "classifier", "joint"] {
        let summary = stdout_json(&run(&["train", "--config", c, "--stage", stage]));
        assert_eq!(summary["stage"], stage);
        assert!(Path::new(summary["checkpoint"].as_str().unwrap()).exists());
    }

    let lr = dir.path().join("lr.png");
    write_png(&lr, 40, 52);
    let out_dir = dir.path().join("out");
    let o = out_dir.to_str().unwrap();
    let forced = stdout_json(&run(&[
        "infer", "--config", c, "--input", lr.to_str().unwrap(), "--out", o, "--branch", "3",
    ]));
    let summary = &forced["summary"];
    assert_eq!(summary["output_dims"], serde_json::json!([160, 208]));
    assert_eq!(summary["percentages"], serde_json::json!([0.0, 0.0, 100.0]));
    assert_eq!(summary["report"]["class_module_flops"], 0);
    for key in ["sr", "overlay", "report"] {
        assert!(Path::new(forced[key].as_str().unwrap()).exists(), "{key}");
    }

    let routed = stdout_json(&run(&["infer", "--config", c, "--input", lr.to_str().unwrap(), "--out", o]));
    let total: f64 = routed["summary"]["percentages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .sum();
    assert!((total - 100.0).abs() < 1e-9, "{total}");

    assert_eq!(
        run(&["infer", "--config", c, "--input", lr.to_str().unwrap(), "--out", o, "--branch", "4"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(&["infer", "--config", c, "--input", lr.to_str().unwrap(), "--out", o, "--branch", "0"])
            .status
            .code(),
        Some(2)
    );

    let metrics = stdout_json(&run(&["eval", "--config", c]));
    assert!((metrics["forced_base"]["ratio_vs_base"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(metrics["routed"]["psnr"].as_f64().is_some());
}

fn write_png(path: &Path, h: usize, w: usize) {
    let img = classsr::imaging::Image::from_fn(h, w, 1, |_, y, x| ((x * 5 + y * 3) % 64) as f32 / 63.0).unwrap();
    img.save_png(path).unwrap();
}
