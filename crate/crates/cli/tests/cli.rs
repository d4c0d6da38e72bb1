//! Runs the `ctqc` binary end to end and checks artifacts and exit codes.

use ctqc::gan_qc::AffineGenerator;
use ctqc::harness::{format_significant, LinearModel, FEATURE_DIM};
use ctqc::qc::SliceStack;
use ctqc::{Image, Severity};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn ctqc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctqc"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn quick_config(dir: &Path) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        r#"{
  "loss": {"kind": "cb_ldam", "m": 0.3, "s": 50, "beta": 0.999, "scaling_mode": "multiply"},
  "train": {"learning_rate": 0.01, "epochs": 5},
  "cv": {"k": 4, "seed": 2}
}"#,
    )
    .unwrap();
    path
}

fn synth_stacks(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    let out = ctqc(&[
        "synth",
        "--counts",
        "6,8,5,4",
        "--slices",
        "4",
        "--side",
        "16",
        "--seed",
        "9",
        "--output",
        s(&data),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    data.join("manifest.csv")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn preprocess_clean_and_darkened_phantoms() {
    let tmp = TempDir::new().unwrap();
    let vols = tmp.path().join("vols");
    for (dir, darken) in [("clean", None), ("dark", Some("20"))] {
        let mut args = vec![
            "synth", "--format", "nifti", "--counts", "1", "--slices", "40", "--side", "48",
        ];
        if let Some(z) = darken {
            args.extend(["--darken", z]);
        }
        let target = vols.join(dir);
        args.extend(["--output", s(&target)]);
        assert_eq!(code(&ctqc(&args)), 0);
    }
    for (dir, repairs) in [("clean", 0), ("dark", 1)] {
        let out_dir = tmp.path().join(format!("out_{dir}"));
        let out = ctqc(&[
            "preprocess",
            s(&vols.join(dir).join("p0000.nii")),
            "--output",
            s(&out_dir),
        ]);
        assert_eq!(code(&out), 0);
        let report = read_json(&out_dir.join("p0000.qc.json"));
        assert_eq!(report["repairs_applied"], repairs);
        let stack =
            SliceStack::from_bytes(&std::fs::read(out_dir.join("p0000.stack")).unwrap()).unwrap();
        assert_eq!((stack.len(), stack.side()), (10, 224));
    }
}

#[test]
fn preprocess_labels_from_manifest() {
    let tmp = TempDir::new().unwrap();
    let vols = tmp.path().join("vols");
    assert_eq!(
        code(&ctqc(&[
            "synth",
            "--format",
            "nifti",
            "--counts",
            "0,0,1",
            "--slices",
            "16",
            "--side",
            "24",
            "--output",
            s(&vols)
        ])),
        0
    );
    let out_dir = tmp.path().join("out");
    let out = ctqc(&[
        "preprocess",
        "--manifest",
        s(&vols.join("manifest.csv")),
        "--output",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0);
    let stack =
        SliceStack::from_bytes(&std::fs::read(out_dir.join("p0000.stack")).unwrap()).unwrap();
    assert_eq!(stack.label, Some(Severity::CT2));
}

#[test]
fn preprocess_rejects_bad_magic() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(
        code(&ctqc(&[
            "synth",
            "--format",
            "nifti",
            "--counts",
            "1",
            "--slices",
            "12",
            "--side",
            "16",
            "--output",
            s(tmp.path())
        ])),
        0
    );
    let path = tmp.path().join("p0000.nii");
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[344..348].copy_from_slice(b"ni1\0");
    let bad = tmp.path().join("broken.nii");
    std::fs::write(&bad, bytes).unwrap();
    let out = ctqc(&["preprocess", s(&bad), "--output", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("broken.nii"));
}

#[test]
fn preprocess_pipeline_failure_names_patient() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(
        code(&ctqc(&[
            "synth",
            "--format",
            "nifti",
            "--counts",
            "1",
            "--slices",
            "2",
            "--side",
            "8",
            "--output",
            s(tmp.path())
        ])),
        0
    );
    let cfg = tmp.path().join("trim.json");
    std::fs::write(&cfg, r#"{"pipeline": {"trim_fraction": 0.49}}"#).unwrap();
    let out = ctqc(&[
        "preprocess",
        s(&tmp.path().join("p0000.nii")),
        "--config",
        s(&cfg),
        "--output",
        s(&tmp.path().join("o")),
    ]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("p0000"));
}

#[test]
fn crossval_outputs_and_determinism() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_stacks(tmp.path());
    let cfg = quick_config(tmp.path());
    let run = |name: &str| {
        let dir = tmp.path().join(name);
        let out = ctqc(&[
            "crossval",
            "--config",
            s(&cfg),
            "--manifest",
            s(&manifest),
            "--output",
            s(&dir),
        ]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        dir
    };
    let (a, b) = (run("a"), run("b"));
    for file in ["crossval.json", "crossval_summary.csv"] {
        assert_eq!(
            std::fs::read(a.join(file)).unwrap(),
            std::fs::read(b.join(file)).unwrap()
        );
    }
    let json = read_json(&a.join("crossval.json"));
    assert_eq!(json["folds"].as_array().unwrap().len(), 4);
    let csv = std::fs::read_to_string(a.join("crossval_summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("metric,mean,sd\nmcc,"));
}

#[test]
fn crossval_split_failure_exits_4() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_stacks(tmp.path());
    let cfg = tmp.path().join("k.json");
    std::fs::write(
        &cfg,
        r#"{"cv": {"k": 5, "split_mode": "patient"}, "train": {"epochs": 1}}"#,
    )
    .unwrap();
    let out = ctqc(&[
        "crossval",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--output",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn config_errors_exit_5() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_stacks(tmp.path());
    for body in [
        r#"{"cv": {"k": 1}}"#,
        r#"{"unknown": 1}"#,
        r#"{"loss": {"kind": "ce", "m": 0.3}}"#,
        r#"{"train": {"momentum": 1.5}}"#,
    ] {
        let cfg = tmp.path().join("bad.json");
        std::fs::write(&cfg, body).unwrap();
        let out = ctqc(&[
            "crossval",
            "--config",
            s(&cfg),
            "--manifest",
            s(&manifest),
            "--output",
            s(tmp.path()),
        ]);
        assert_eq!(code(&out), 5, "{body}");
    }
}

#[test]
fn missing_manifest_exits_2() {
    let tmp = TempDir::new().unwrap();
    let out = ctqc(&[
        "crossval",
        "--manifest",
        s(&tmp.path().join("nope.csv")),
        "--output",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gridsearch_matches_crossval_and_rejects_empty_grid() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_stacks(tmp.path());
    let cfg = tmp.path().join("grid.json");
    std::fs::write(
        &cfg,
        r#"{"grid": {"scaling_mode": "multiply"},
            "loss": {"kind": "cb_ldam", "m": 0.3, "s": 50, "beta": 0.999, "scaling_mode": "multiply"},
            "train": {"learning_rate": 0.01, "epochs": 3}}"#,
    )
    .unwrap();
    let grid_dir = tmp.path().join("g");
    let out = ctqc(&[
        "gridsearch",
        "--config",
        s(&cfg),
        "--manifest",
        s(&manifest),
        "--m",
        "0.1,0.3",
        "--s",
        "10,50",
        "--output",
        s(&grid_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(grid_dir.join("gridsearch.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "m\\s,10,50");
    assert!(lines.iter().all(|l| l.split(',').count() == 3));

    let single = tmp.path().join("one");
    assert_eq!(
        code(&ctqc(&[
            "gridsearch",
            "--config",
            s(&cfg),
            "--manifest",
            s(&manifest),
            "--m",
            "0.3",
            "--s",
            "50",
            "--output",
            s(&single)
        ])),
        0
    );
    let cv_dir = tmp.path().join("cv");
    assert_eq!(
        code(&ctqc(&[
            "crossval",
            "--config",
            s(&cfg),
            "--manifest",
            s(&manifest),
            "--output",
            s(&cv_dir)
        ])),
        0
    );
    let cell = std::fs::read_to_string(single.join("gridsearch.csv")).unwrap();
    let cell = cell
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .to_string();
    let mean_mcc = read_json(&cv_dir.join("crossval.json"))["summary"]["mean"]["mcc"]
        .as_f64()
        .unwrap();
    assert_eq!(cell, format_significant(mean_mcc, 6));

    let out = ctqc(&[
        "gridsearch",
        "--manifest",
        s(&manifest),
        "--output",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 5);
}

/// A model whose class is the nearest of four brightness levels.
fn brightness_model() -> LinearModel {
    let centres = [0.125, 0.375, 0.625, 0.875];
    let mut w = Vec::new();
    for c in centres {
        w.extend(std::iter::repeat_n(2.0 * c / 256.0, 256));
        w.push(-c * c);
    }
    LinearModel::from_weights(4, FEATURE_DIM, w).unwrap()
}

fn write_stack(path: &Path, levels: &[f64]) {
    let slices = levels.iter().map(|&v| Image::filled(32, 32, v)).collect();
    let stack = SliceStack::new("patient", None, 32, slices).unwrap();
    std::fs::write(path, stack.to_bytes()).unwrap();
}

#[test]
fn diagnose_votes() {
    let tmp = TempDir::new().unwrap();
    let model = tmp.path().join("model.bin");
    std::fs::write(&model, brightness_model().to_bytes()).unwrap();

    let mut levels = vec![0.4];
    levels.extend([0.6; 8]);
    levels.push(0.9);
    let stack = tmp.path().join("votes.stack");
    write_stack(&stack, &levels);
    let out = ctqc(&[
        "diagnose",
        "--model",
        s(&model),
        "--stack",
        s(&stack),
        "--output",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 0);
    let d = read_json(&tmp.path().join("patient.diagnosis.json"));
    assert_eq!(d["vote_counts"], serde_json::json!([0, 1, 8, 1]));
    assert_eq!(d["diagnosis"], "CT2");

    write_stack(&stack, &[0.1; 10]);
    assert_eq!(
        code(&ctqc(&[
            "diagnose",
            "--model",
            s(&model),
            "--stack",
            s(&stack),
            "--output",
            s(tmp.path())
        ])),
        0
    );
    assert_eq!(
        read_json(&tmp.path().join("patient.diagnosis.json"))["diagnosis"],
        "CT0"
    );

    let bytes = std::fs::read(&model).unwrap();
    std::fs::write(&model, &bytes[..bytes.len() - 5]).unwrap();
    let out = ctqc(&[
        "diagnose",
        "--model",
        s(&model),
        "--stack",
        s(&stack),
        "--output",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_then_evaluate() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth_stacks(tmp.path());
    let cfg = quick_config(tmp.path());
    let dir = tmp.path().join("t");
    assert_eq!(
        code(&ctqc(&[
            "train",
            "--config",
            s(&cfg),
            "--manifest",
            s(&manifest),
            "--output",
            s(&dir)
        ])),
        0
    );
    let model = LinearModel::from_bytes(&std::fs::read(dir.join("model.bin")).unwrap()).unwrap();
    assert_eq!((model.num_classes(), model.input_dim()), (4, FEATURE_DIM));
    assert_eq!(
        read_json(&dir.join("train.json"))["epoch_losses"]
            .as_array()
            .unwrap()
            .len(),
        5
    );
    let out = ctqc(&[
        "evaluate",
        "--model",
        s(&dir.join("model.bin")),
        "--manifest",
        s(&manifest),
        "--output",
        s(&dir),
    ]);
    assert_eq!(code(&out), 0);
    assert_eq!(read_json(&dir.join("evaluation.json"))["n"], 23 * 4);
}

fn toy_generator() -> AffineGenerator {
    // 8x8 image, latent dim 4; pixel 0 ignores the latent code
    let mut a = Vec::new();
    for p in 0..64usize {
        for j in 0..4usize {
            let v = if p == 0 {
                0.0
            } else {
                (((p * 7 + j * 13) % 11) as f64 - 5.0) / 10.0
            };
            a.push(v);
        }
    }
    let b = (0..64).map(|p| 0.5 + 0.01 * p as f64).collect();
    AffineGenerator::new(4, 8, 8, a, b).unwrap()
}

#[test]
fn anoscore_in_range_and_perturbed() {
    use ctqc::gan_qc::Generator;
    let tmp = TempDir::new().unwrap();
    let gen = toy_generator();
    let gen_path = tmp.path().join("gen.bin");
    std::fs::write(&gen_path, gen.to_bytes()).unwrap();

    // stack pixels are f32, so targets are built from f32-exact images
    let clean: Vec<Image> = [[0.25, -0.5, 0.75, 0.125], [0.5, 0.5, -0.25, 0.0]]
        .iter()
        .map(|z| gen.generate(z).map(|v| v as f32 as f64))
        .collect();
    let mut slices = clean.clone();
    for img in &clean {
        let mut p = img.clone();
        p.as_mut_slice()[0] += 0.5;
        slices.push(p);
    }
    let stack_path = tmp.path().join("ano.stack");
    std::fs::write(
        &stack_path,
        SliceStack::new("ano", None, 8, slices).unwrap().to_bytes(),
    )
    .unwrap();

    let out = ctqc(&[
        "anoscore",
        "--stack",
        s(&stack_path),
        "--generator",
        s(&gen_path),
        "--lambda",
        "0",
        "--threshold",
        "0.1",
        "--output",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let j = read_json(&tmp.path().join("ano.anoscore.json"));
    let scores: Vec<f64> = j["slices"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["score"].as_f64().unwrap())
        .collect();
    let verdicts: Vec<&str> = j["slices"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["verdict"].as_str().unwrap())
        .collect();
    assert!(scores[0] < 1e-2 && scores[1] < 1e-2, "{scores:?}");
    assert!(scores[2] > scores[0] && scores[3] > scores[1]);
    assert_eq!(verdicts, ["normal", "normal", "abnormal", "abnormal"]);

    let out = ctqc(&[
        "anoscore",
        "--stack",
        s(&stack_path),
        "--generator",
        s(&gen_path),
        "--lambda",
        "1.5",
        "--output",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 5);
    std::fs::write(&gen_path, &gen.to_bytes()[..40]).unwrap();
    let out = ctqc(&[
        "anoscore",
        "--stack",
        s(&stack_path),
        "--generator",
        s(&gen_path),
        "--output",
        s(tmp.path()),
    ]);
    assert_eq!(code(&out), 2);
}
