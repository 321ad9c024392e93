//! End-to-end runs of the compiled binary: the directory handshake between
//! subcommands, the exit code contract, and deterministic-mode reruns.

use std::path::Path;
use std::process::{Command, Output};

fn xfdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xfdd"))
        .args(args)
        .env("XFDD_DETERMINISTIC", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = xfdd(args);
    assert!(
        out.status.success(),
        "xfdd {:?} failed with {:?}\nstderr: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = xfdd(args);
    assert_eq!(
        out.status.code(),
        Some(code),
        "xfdd {:?} expected exit {code}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn datagen_into(dir: &Path, seed: &str) {
    ok(&[
        "datagen",
        "--out",
        dir.to_str().unwrap(),
        "--per-class-windows",
        "12",
        "--duration",
        "2",
        "--rate",
        "25",
        "--window",
        "10",
        "--step",
        "10",
        "--seed",
        seed,
    ]);
}

#[test]
fn pipeline_handshake_produces_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let recs = tmp.path().join("recs");
    let prep = tmp.path().join("prep");
    let run = tmp.path().join("run");

    datagen_into(&recs, "5");
    for name in ["datagen.json", "config.json", "manifest.json"] {
        assert!(recs.join(name).exists(), "{name} missing");
    }

    ok(&[
        "preprocess",
        "--data",
        recs.to_str().unwrap(),
        "--out",
        prep.to_str().unwrap(),
        "--seed",
        "5",
    ]);
    for stem in ["train", "val", "test"] {
        for ext in ["json", "f32", "labels"] {
            assert!(prep.join(format!("{stem}.{ext}")).exists(), "{stem}.{ext} missing");
        }
    }

    let stdout = ok(&[
        "train",
        "--data",
        prep.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--model",
        "hybrid",
        "--conv",
        "1",
        "--rec-layers",
        "1",
        "--hidden",
        "16",
        "--fc",
        "1",
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--dropout",
        "0",
        "--seed",
        "5",
    ]);
    assert!(stdout.contains("test accuracy"), "train summary line: {stdout}");
    for name in ["model.ckpt", "history.csv", "curves.svg", "metrics.csv", "report.json", "train.json"]
    {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("Metric,"), "metric table header: {metrics}");
    assert!(metrics.contains("Train Time (s)"));

    ok(&["evaluate", "--run", run.to_str().unwrap(), "--data", prep.to_str().unwrap()]);
    assert!(run.join("eval.json").exists());
    assert!(run.join("eval.csv").exists());

    ok(&[
        "explain",
        "--run",
        run.to_str().unwrap(),
        "--data",
        prep.to_str().unwrap(),
        "--methods",
        "ig,deeplift",
        "--baselines",
        "mean",
        "--windows",
        "4",
        "--ig-steps",
        "2",
        "--gs-samples",
        "2",
        "--random-k",
        "2",
        "--interaction-windows",
        "1",
        "--select-top",
        "10",
    ]);
    let explain = run.join("explain");
    for name in [
        "gfi-ig-mean.csv",
        "gfi-deeplift-mean.csv",
        "pcfi-ig-mean.csv",
        "interactions.csv",
        "interactions.svg",
        "timing.csv",
        "top10.json",
    ] {
        assert!(explain.join(name).exists(), "{name} missing");
    }
    let top: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(explain.join("top10.json")).unwrap())
            .unwrap();
    assert_eq!(top["channels"].as_array().unwrap().len(), 10);
    assert_eq!(top["baseline"], "mean");

    // The selected feature list feeds a reduced retrain.
    let run2 = tmp.path().join("run2");
    ok(&[
        "train",
        "--data",
        prep.to_str().unwrap(),
        "--out",
        run2.to_str().unwrap(),
        "--model",
        "hybrid",
        "--conv",
        "1",
        "--rec-layers",
        "1",
        "--hidden",
        "16",
        "--fc",
        "1",
        "--epochs",
        "1",
        "--batch-size",
        "16",
        "--dropout",
        "0",
        "--seed",
        "5",
        "--features",
        explain.join("top10.json").to_str().unwrap(),
    ]);
    assert!(run2.join("model.ckpt").exists());
}

#[test]
fn deterministic_mode_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let mut digests = Vec::new();
    for side in ["a", "b"] {
        let recs = tmp.path().join(side).join("recs");
        let prep = tmp.path().join(side).join("prep");
        let run = tmp.path().join(side).join("run");
        datagen_into(&recs, "9");
        ok(&[
            "preprocess",
            "--data",
            recs.to_str().unwrap(),
            "--out",
            prep.to_str().unwrap(),
            "--seed",
            "9",
        ]);
        ok(&[
            "train",
            "--data",
            prep.to_str().unwrap(),
            "--out",
            run.to_str().unwrap(),
            "--model",
            "hybrid",
            "--conv",
            "1",
            "--rec-layers",
            "1",
            "--hidden",
            "16",
            "--fc",
            "1",
            "--epochs",
            "1",
            "--batch-size",
            "16",
            "--dropout",
            "0",
            "--seed",
            "9",
        ]);
        let mut files = Vec::new();
        for dir in [&recs, &prep, &run] {
            let mut names: Vec<_> = std::fs::read_dir(dir)
                .unwrap()
                .map(|e| e.unwrap().path())
                .filter(|p| p.is_file())
                .collect();
            names.sort();
            for p in names {
                files.push((
                    p.file_name().unwrap().to_string_lossy().into_owned(),
                    std::fs::read(&p).unwrap(),
                ));
            }
        }
        digests.push(files);
    }
    assert_eq!(digests[0].len(), digests[1].len());
    for (a, b) in digests[0].iter().zip(&digests[1]) {
        assert_eq!(a.0, b.0, "file set mismatch");
        assert_eq!(a.1, b.1, "{} differs between reruns", a.0);
    }
}

#[test]
fn usage_errors_exit_64() {
    let tmp = tempfile::tempdir().unwrap();
    let msg = fails_with(&["datagen"], 64);
    assert!(msg.contains("--out"), "{msg}");

    let recs = tmp.path().join("recs");
    datagen_into(&recs, "3");
    let prep = tmp.path().join("prep");
    let msg = fails_with(
        &[
            "preprocess",
            "--data",
            recs.to_str().unwrap(),
            "--out",
            prep.to_str().unwrap(),
            "--split",
            "0.5,0.5",
        ],
        64,
    );
    assert!(msg.contains("3 fractions"), "{msg}");

    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, "{\"no_such_key\": 1}").unwrap();
    let msg = fails_with(
        &["datagen", "--config", bad.to_str().unwrap(), "--out", prep.to_str().unwrap()],
        64,
    );
    assert!(msg.contains("no_such_key"), "{msg}");

    assert_eq!(xfdd(&["nosuchcommand"]).status.code(), Some(64));
}

#[test]
fn missing_inputs_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = tmp.path().join("out");

    let msg = fails_with(
        &["preprocess", "--data", empty.to_str().unwrap(), "--out", out.to_str().unwrap()],
        3,
    );
    assert!(msg.contains("datagen"), "{msg}");

    let msg = fails_with(
        &["train", "--data", empty.to_str().unwrap(), "--out", out.to_str().unwrap()],
        3,
    );
    assert!(msg.contains("missing prerequisite"), "{msg}");

    let msg = fails_with(
        &["evaluate", "--run", empty.to_str().unwrap(), "--data", empty.to_str().unwrap()],
        3,
    );
    assert!(msg.contains("model.ckpt"), "{msg}");
}

#[test]
fn corrupt_recordings_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let recs = tmp.path().join("recs");
    datagen_into(&recs, "4");
    let victim = std::fs::read_dir(&recs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "csv"))
        .unwrap();
    let text = std::fs::read_to_string(&victim).unwrap();
    std::fs::write(&victim, text.replacen(",label", ",labelx", 1)).unwrap();
    let out = tmp.path().join("prep");
    fails_with(
        &["preprocess", "--data", recs.to_str().unwrap(), "--out", out.to_str().unwrap()],
        2,
    );
}

#[test]
fn help_and_version_exit_zero() {
    assert!(xfdd(&["--help"]).status.success());
    assert!(xfdd(&["--version"]).status.success());
    assert!(xfdd(&["train", "--help"]).status.success());
}
