use std::path::Path;
use std::process::{Command, Output};

use foodlens::FeatureMatrix;

fn foodlens(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foodlens"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn expect_ok(dir: &Path, args: &[&str]) -> String {
    let out = foodlens(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn expect_code(dir: &Path, args: &[&str], code: i32) -> String {
    let out = foodlens(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    stderr
}

/// Two well separated classes in three columns.
fn write_toy_features(path: &Path, per_class: usize) {
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for class in 0..2 {
        for i in 0..per_class {
            let base = if class == 0 { -2.0 } else { 2.0 };
            let jitter = (i as f32 * 0.37).sin() * 0.3;
            values.extend([base + jitter, base - jitter, jitter]);
            labels.push(class);
        }
    }
    let fm = FeatureMatrix::new(3, values, labels, vec!["a".into(), "b".into()]).unwrap();
    std::fs::write(path, fm.to_bytes().unwrap()).unwrap();
}

#[test]
fn end_to_end_small_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    expect_ok(
        dir,
        &[
            "synth",
            "--out",
            "orig",
            "--per-class",
            "3",
            "--size",
            "16",
            "--seed",
            "5",
        ],
    );
    let said = expect_ok(
        dir,
        &[
            "augment",
            "--manifest",
            "orig/manifest.json",
            "--out",
            "aug",
            "--seed",
            "1",
        ],
    );
    assert!(said.contains("960 variants"), "{said}");
    assert!(dir.join("aug/img_0000_a31.png").exists());

    for name in ["orig", "aug"] {
        let manifest = format!("{name}/manifest.json");
        let out = format!("{name}.fmx");
        expect_ok(
            dir,
            &["ingest", "--manifest", &manifest, "--out", &out, "--preset", "tiny"],
        );
    }
    let aug = FeatureMatrix::from_bytes(&std::fs::read(dir.join("aug.fmx")).unwrap()).unwrap();
    assert_eq!((aug.n(), aug.num_classes()), (960, 10));

    expect_ok(
        dir,
        &[
            "cluster-sweep",
            "--features",
            "orig.fmx",
            "--kmin",
            "2",
            "--kmax",
            "4",
            "--out",
            "sweep.json",
        ],
    );
    let sweep: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["per_k"].as_object().unwrap().len(), 3);

    expect_ok(
        dir,
        &["train", "--features", "aug.fmx", "--model", "svm", "--out", "svm.fmd"],
    );
    let eval = expect_ok(dir, &["evaluate", "--features", "aug.fmx", "--model", "svm.fmd"]);
    let eval: serde_json::Value = serde_json::from_str(eval.trim()).unwrap();
    assert_eq!(eval["rows"], 192);
    assert!(eval["accuracy"].as_f64().unwrap() > 0.5, "{eval}");

    std::fs::write(
        dir.join("exp.json"),
        r#"{"original": {"features": "orig.fmx"}, "augmented": {"features": "aug.fmx"},
            "split": {"test_fraction": 0.25, "seed": 1},
            "gbdt": {"rounds": 3}, "mlp": {"epochs": 2, "hidden": [16, 8]}}"#,
    )
    .unwrap();
    let table = expect_ok(dir, &["experiment", "--config", "exp.json", "--out", "report.json"]);
    assert!(table.contains("Augmented"), "{table}");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 9);
}

#[test]
fn trained_models_round_trip_through_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_toy_features(&dir.join("toy.fmx"), 20);
    for (model, extra) in [
        ("svm", vec!["--kernel", "linear"]),
        ("gbdt", vec!["--rounds", "5"]),
        ("mlp", vec!["--hidden", "8,4", "--epochs", "40", "--dropout", "0,0"]),
    ] {
        let out = format!("{model}.fmd");
        let mut args = vec!["train", "--features", "toy.fmx", "--model", model, "--out", &out];
        args.extend(extra);
        expect_ok(dir, &args);
        let eval = expect_ok(dir, &["evaluate", "--features", "toy.fmx", "--model", &out]);
        let eval: serde_json::Value = serde_json::from_str(eval.trim()).unwrap();
        assert_eq!(eval["model"], model);
        assert_eq!(eval["accuracy"], 1.0, "{model}: {eval}");
    }
}

#[test]
fn bad_config_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(
        dir.join("bad.json"),
        r#"{"original": {}, "augmented": {}, "surprise": true}"#,
    )
    .unwrap();
    let err = expect_code(dir, &["experiment", "--config", "bad.json", "--out", "r.json"], 2);
    assert!(err.contains("surprise"), "{err}");

    std::fs::write(dir.join("empty.json"), r#"{"original": {}, "augmented": {}}"#).unwrap();
    expect_code(dir, &["experiment", "--config", "empty.json", "--out", "r.json"], 2);
    expect_code(
        dir,
        &["cluster-sweep", "--features", "missing.fmx", "--out", "s.json"],
        2,
    );
    expect_code(
        dir,
        &["train", "--features", "x.fmx", "--model", "forest", "--out", "m"],
        2,
    );
}

#[test]
fn unsplittable_data_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let fm = FeatureMatrix::new(
        1,
        vec![0.0, 1.0, 2.0, 3.0],
        vec![0, 0, 0, 1],
        vec!["a".into(), "b".into()],
    )
    .unwrap();
    std::fs::write(dir.join("lonely.fmx"), fm.to_bytes().unwrap()).unwrap();
    let err = expect_code(
        dir,
        &["train", "--features", "lonely.fmx", "--model", "gbdt", "--out", "m.fmd"],
        3,
    );
    assert!(err.contains("class 1"), "{err}");
}

#[test]
fn feature_width_mismatch_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_toy_features(&dir.join("toy.fmx"), 10);
    expect_ok(
        dir,
        &[
            "train",
            "--features",
            "toy.fmx",
            "--model",
            "gbdt",
            "--rounds",
            "2",
            "--out",
            "m.fmd",
        ],
    );
    let fm = FeatureMatrix::new(
        2,
        vec![0.0; 40],
        (0..20).map(|i| i % 2).collect(),
        vec!["a".into(), "b".into()],
    )
    .unwrap();
    std::fs::write(dir.join("narrow.fmx"), fm.to_bytes().unwrap()).unwrap();
    let err = expect_code(dir, &["evaluate", "--features", "narrow.fmx", "--model", "m.fmd"], 3);
    assert!(err.contains("dimension mismatch"), "{err}");
}

#[test]
fn nan_features_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut bytes = b"FMX1".to_vec();
    bytes.extend(4u32.to_le_bytes());
    bytes.extend(1u32.to_le_bytes());
    for v in [0.5f32, f32::NAN, 1.5, 2.5] {
        bytes.extend(v.to_le_bytes());
    }
    for l in [0u16, 0, 1, 1] {
        bytes.extend(l.to_le_bytes());
    }
    bytes.extend(br#"{"classes":["a","b"],"source":"hand","seed":0}"#);
    std::fs::write(dir.join("nan.fmx"), bytes).unwrap();
    let err = expect_code(
        dir,
        &[
            "train",
            "--features",
            "nan.fmx",
            "--model",
            "svm",
            "--all-rows",
            "--out",
            "m.fmd",
        ],
        4,
    );
    assert!(err.contains("non-finite"), "{err}");
}
