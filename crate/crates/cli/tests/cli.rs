use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn wsdmil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsdmil")).args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn small_dataset(dir: &Path, seed: &str) {
    let out = wsdmil(&[
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--num-bags",
        "10",
        "--grid-side",
        "17",
        "--seed",
        seed,
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir.join("bags"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    files.sort();
    files.push(dir.join("manifest.json"));
    files
        .into_iter()
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(p).unwrap()))
        .collect()
}

#[test]
fn generate_default_spec_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        let out = wsdmil(&["generate", "--out", d.to_str().unwrap(), "--seed", "11"]);
        assert_eq!(code(&out), 0);
    }
    let manifest = json(&a.join("manifest.json"));
    assert_eq!(manifest["bags"].as_array().unwrap().len(), 100);
    assert_eq!(manifest["seed"], 11);
    assert_eq!(json(&a.join("spec.json"))["seed"], 11);
    assert_eq!(dir_bytes(&a), dir_bytes(&b));
}

#[test]
fn generate_reads_a_spec_file() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = tmp.path().join("spec.json");
    fs::write(&spec, r#"{"num_bags": 4, "grid_side": 17, "seed": 5}"#).unwrap();
    let out_dir = tmp.path().join("d");
    let out = wsdmil(&["generate", spec.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let manifest = json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["bags"].as_array().unwrap().len(), 4);
    assert_eq!(manifest["seed"], 5);

    let missing = tmp.path().join("missing.json");
    let out = wsdmil(&["generate", missing.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.json"));
}

#[test]
fn sample_keeps_the_requested_share() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_dataset(&data, "2");
    let out_dir = tmp.path().join("s");
    let out = wsdmil(&[
        "sample",
        data.join("manifest.json").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--alpha",
        "20",
        "--seed",
        "4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = json(&out_dir.join("manifest.json"));
    assert_eq!(manifest["seed"], 4);
    let sampled: u64 = fs::read_dir(out_dir.join("bags")).unwrap().map(|e| e.unwrap().metadata().unwrap().len()).sum();
    let original: u64 = fs::read_dir(data.join("bags")).unwrap().map(|e| e.unwrap().metadata().unwrap().len()).sum();
    assert!(sampled * 3 < original, "{sampled} vs {original}");
}

#[test]
fn train_runs_every_ablation() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_dataset(&data, "3");
    let manifest = data.join("manifest.json");
    let flags: [&[&str]; 5] = [
        &[],
        &["--no-wsda"],
        &["--no-serg"],
        &["--fix-win", "8"],
        &["--no-wsda", "--no-serg"],
    ];
    for (i, extra) in flags.iter().enumerate() {
        let out_dir = tmp.path().join(format!("run{i}"));
        let mut args = vec![
            "train",
            manifest.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--epochs",
            "1",
            "--folds",
            "2",
            "--jobs",
            "2",
            "--alpha",
            "60",
            "--seed",
            "8",
        ];
        args.extend_from_slice(extra);
        let out = wsdmil(&args);
        assert_eq!(code(&out), 0, "{extra:?}: {}", String::from_utf8_lossy(&out.stderr));
        let report = json(&out_dir.join("report.json"));
        assert_eq!(report["seed"], 8);
        assert_eq!(report["folds"].as_array().unwrap().len(), 2);
        assert!(out_dir.join("fold_0.wsdc").exists() && out_dir.join("fold_1.wsdc").exists());
    }
}

#[test]
fn alpha_flag_reaches_training() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_dataset(&data, "6");
    let manifest = data.join("manifest.json");
    let peak = |alpha: &str| {
        let out_dir = tmp.path().join(format!("a{alpha}"));
        let out = wsdmil(&[
            "train",
            manifest.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--epochs",
            "1",
            "--folds",
            "2",
            "--variant",
            "no-wsda-serg",
            "--alpha",
            alpha,
        ]);
        assert_eq!(code(&out), 0);
        let report = json(&out_dir.join("report.json"));
        assert_eq!(report["train"]["alpha"].as_f64().unwrap(), alpha.parse::<f64>().unwrap());
        report["peak_bytes"]["mean"].as_f64().unwrap()
    };
    assert!(peak("20") < peak("100"));
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_dataset(&data, "1");
    let config = tmp.path().join("run.json");
    fs::write(
        &config,
        r#"{"seed": 21, "variant": "mean-pool", "train": {"epochs": 1, "folds": 2, "alpha": 60}}"#,
    )
    .unwrap();
    let out_dir = tmp.path().join("t");
    let run = |extra: &[&str]| {
        let mut args: Vec<String> = vec![
            "train".into(),
            data.join("manifest.json").to_str().unwrap().into(),
            "--out".into(),
            out_dir.to_str().unwrap().into(),
            "--config".into(),
            config.to_str().unwrap().into(),
        ];
        args.extend(extra.iter().map(|s| s.to_string()));
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        wsdmil(&refs)
    };
    assert_eq!(code(&run(&[])), 0);
    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["seed"], 21);
    assert_eq!(report["train"]["alpha"].as_f64(), Some(60.0));
    assert_eq!(report["model"]["pooling"], "mean");

    assert_eq!(code(&run(&["--seed", "22", "--alpha", "40"])), 0);
    let report = json(&out_dir.join("report.json"));
    assert_eq!(report["seed"], 22);
    assert_eq!(report["train"]["alpha"].as_f64(), Some(40.0));

    fs::write(&config, r#"{"trian": {}}"#).unwrap();
    assert_eq!(code(&run(&[])), 2);
}

#[test]
fn usage_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_dataset(&data, "9");
    let manifest = data.join("manifest.json");
    let m = manifest.to_str().unwrap();
    let out = tmp.path().join("x");
    let o = out.to_str().unwrap();
    assert_eq!(code(&wsdmil(&["train", m, "--out", o, "--no-wsda", "--fix-win", "8"])), 2);
    assert_eq!(code(&wsdmil(&["train", m, "--out", o, "--variant", "bogus"])), 2);
    assert_eq!(code(&wsdmil(&["train", m, "--out", o, "--alpha", "0"])), 2);
    assert_eq!(code(&wsdmil(&["train", "nope/manifest.json", "--out", o])), 2);
    assert_eq!(code(&wsdmil(&["bench", m, "--alphas", ""])), 2);
    assert_eq!(code(&wsdmil(&["frobnicate"])), 2);
}

#[test]
fn bench_writes_three_rows_and_a_footer() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_dataset(&data, "5");
    let csv_path = tmp.path().join("bench.csv");
    let out = wsdmil(&[
        "bench",
        data.join("manifest.json").to_str().unwrap(),
        "--alphas",
        "100,60,20",
        "--seed",
        "13",
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(csv_path).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,peak_bytes,ratio");
    let ratios: Vec<f64> = lines[1..4].iter().map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(ratios[0], 1.0);
    assert!(ratios[1] <= ratios[0] && ratios[2] <= ratios[1]);
    assert_eq!(&lines[4..], ["# seed=13", "# ratios_monotone=true"]);
}

#[test]
fn train_then_eval() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    small_dataset(&data, "4");
    let manifest = data.join("manifest.json");
    let run_dir = tmp.path().join("t");
    let out = wsdmil(&[
        "train",
        manifest.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--variant",
        "no-wsda-serg",
        "--epochs",
        "2",
        "--folds",
        "2",
        "--seed",
        "30",
    ]);
    assert_eq!(code(&out), 0);
    let eval_path = tmp.path().join("eval.json");
    let checkpoint = run_dir.join("fold_1.wsdc");
    let args = [
        "eval",
        checkpoint.to_str().unwrap(),
        manifest.to_str().unwrap(),
        "--seed",
        "31",
        "--alpha",
        "60",
        "--out",
        eval_path.to_str().unwrap(),
    ];
    assert_eq!(code(&wsdmil(&args)), 0);
    let eval = json(&eval_path);
    assert_eq!((eval["seed"].as_u64(), eval["checkpoint_seed"].as_u64()), (Some(31), Some(30)));
    assert_eq!(eval["bags"], 10);
    let acc = eval["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let again = tmp.path().join("again.json");
    let mut args2 = args;
    args2[8] = again.to_str().unwrap();
    assert_eq!(code(&wsdmil(&args2)), 0);
    assert_eq!(fs::read(eval_path).unwrap(), fs::read(again).unwrap());
}

#[test]
fn gradcheck_default_config_passes() {
    let out = wsdmil(&["gradcheck", "--seed", "2"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seed"], 2);
    assert_eq!(report["instances"], 64);
    assert_eq!(report["report"]["passed"], true);
    assert!(report["report"]["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(!report["report"]["worst"].as_str().unwrap().is_empty());
}

#[test]
fn corrupted_gradient_fails_and_is_named() {
    let out = wsdmil(&["gradcheck", "--variant", "no-wsda-serg", "--corrupt", "classifier.bias"]);
    assert_eq!(code(&out), 1);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["report"]["worst"], "classifier.bias");
    assert_eq!(report["report"]["passed"], false);
    assert_eq!(code(&wsdmil(&["gradcheck", "--variant", "no-wsda-serg", "--corrupt", "nope"])), 2);
}
