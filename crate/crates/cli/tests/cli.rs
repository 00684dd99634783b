use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use megdecode::dataio::read_epochs;
use megdecode::model::{ModelConfig, Variant};
use megdecode::optim::Network;
use megdecode::weights::encode_network;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_megdecode"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn megdecode")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(std::fs::read(path).unwrap()))
}

fn value<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no `{key}` in output:\n{stdout}"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small evoked dataset: 12 channels, 30 samples, 7 subjects.
fn small_data(dir: &Path, seed: &str) -> PathBuf {
    let p = dir.join(format!("data{seed}.megb"));
    ok(&[
        "synth", "--out", s(&p), "--n-channels", "12", "--n-times", "30", "--trials", "6", "--seed", seed,
    ]);
    p
}

fn small_model(dir: &Path, data: &Path, extra: &[&str]) -> PathBuf {
    let p = dir.join("model.megw");
    let mut args = vec![
        "--threads", "1", "train", "--data", s(data), "--out", s(&p), "--k", "4", "--max-iter", "20", "--eval-every",
        "10",
    ];
    args.extend_from_slice(extra);
    ok(&args);
    p
}

#[test]
fn synth_is_deterministic_and_readable() {
    let dir = tempfile::tempdir().unwrap();
    let a = small_data(dir.path(), "42");
    let hash = sha(&a);
    let b = dir.path().join("again.megb");
    let out = ok(&[
        "synth", "--out", s(&b), "--n-channels", "12", "--n-times", "30", "--trials", "6", "--seed", "42",
    ]);
    assert_eq!(sha(&b), hash);
    let other = small_data(dir.path(), "43");
    assert_ne!(sha(&other), hash);

    let set = read_epochs(&a).unwrap();
    assert_eq!(value(&out, "trials"), set.n_trials().to_string());
    assert_eq!(value(&out, "classes"), "5");
    assert_eq!(value(&out, "subjects"), "7");
    assert_eq!(value(&out, "channels"), "12");
    assert_eq!(value(&out, "samples"), "30");
}

#[test]
fn raw_synth_keeps_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("raw.megb");
    let out = ok(&["synth", "--out", s(&p), "--n-channels", "12", "--n-times", "30", "--trials", "2", "--raw"]);
    assert_eq!(value(&out, "baseline_scaled"), "false");
    assert!(read_epochs(&p).unwrap().n_times() > 30);
}

#[test]
fn latent_count_not_below_channel_count_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["synth", "--out", s(&dir.path().join("x")), "--n-channels", "8", "--n-latent", "8"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x").exists());
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(run(&["train", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_input_is_a_usage_error() {
    let out = run(&["train", "--data", "/nonexistent/d.megb", "--out", "/tmp/never.megw"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_model_settings_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "1");
    let out_path = dir.path().join("m.megw");
    let base = ["train", "--data", s(&data), "--out", s(&out_path)];
    for extra in [["--k", "13"], ["--filter-len", "31"], ["--dropout", "1.0"], ["--lr", "-1"]] {
        let mut args = base.to_vec();
        args.extend_from_slice(&extra);
        assert_eq!(run(&args).status.code(), Some(2), "{extra:?}");
    }
}

#[test]
fn zero_iterations_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "5");
    let model = small_model(dir.path(), &data, &["--max-iter", "0", "--seed", "9", "--variant", "var"]);
    let set = read_epochs(&data).unwrap();
    let cfg = ModelConfig {
        n_latent: 4,
        ..ModelConfig::new(Variant::Var, set.n_channels(), set.n_times(), set.n_classes)
    };
    let init = encode_network(&Network::new(cfg, 9).unwrap()).unwrap();
    assert_eq!(sha(&model), hex::encode(Sha256::digest(init)));
}

#[test]
fn pipeline_is_bit_identical_on_one_thread() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "7");
    let run_once = |tag: &str| {
        let model = dir.path().join(format!("m{tag}.megw"));
        let report = dir.path().join(format!("r{tag}.csv"));
        ok(&[
            "--threads", "1", "train", "--data", s(&data), "--out", s(&model), "--report", s(&report), "--k", "4",
            "--max-iter", "30", "--eval-every", "10", "--variant", "var", "--seed", "3",
        ]);
        let eval = ok(&["--threads", "1", "eval", "--data", s(&data), "--model", s(&model), "--held-out", "0"]);
        (sha(&model), std::fs::read_to_string(&report).unwrap(), eval)
    };
    assert_eq!(run_once("a"), run_once("b"));
}

#[test]
fn realtime_without_learning_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "11");
    let model = small_model(dir.path(), &data, &["--held-out", "2"]);
    let eval = ok(&["eval", "--data", s(&data), "--model", s(&model), "--held-out", "2"]);
    let trace = dir.path().join("trace.csv");
    let rt = ok(&[
        "rtsim", "--data", s(&data), "--model", s(&model), "--held-out", "2", "--lr", "0", "--out", s(&trace),
    ]);
    assert_eq!(value(&rt, "accuracy"), value(&eval, "accuracy"));
    let rt0 = ok(&["rtsim", "--data", s(&data), "--model", s(&model), "--held-out", "2", "--lr0"]);
    assert_eq!(value(&rt0, "accuracy"), value(&eval, "accuracy"));
    // 30 trials in batches of 20.
    let csv = std::fs::read_to_string(trace).unwrap();
    assert_eq!(csv.lines().next(), Some("batch,size,accuracy"));
    assert_eq!(csv.lines().count(), 3);
}

#[test]
fn loso_table_has_one_row_per_subject_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "13");
    let csv = dir.path().join("folds.csv");
    let out = ok(&[
        "eval", "--data", s(&data), "--loso", "--k", "4", "--max-iter", "10", "--eval-every", "5", "--out", s(&csv),
    ]);
    let rows: Vec<&str> = out.lines().skip(2).collect();
    assert_eq!(rows.len(), 8, "{out}");
    assert!(rows[7].contains("mean ± SD"));
    assert_eq!(std::fs::read_to_string(csv).unwrap().lines().count(), 8);
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "17");
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "k = 4\nmax_iter = 0\nlr = 0.01\n").unwrap();
    let model = dir.path().join("m.megw");
    let out = ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&model), "--lr", "0.002"]);
    assert_eq!(value(&out, "n_latent"), "4");
    assert_eq!(value(&out, "learning_rate"), "0.002");
    assert_eq!(value(&out, "iterations_run"), "0");

    std::fs::write(&cfg, "this line is not a pair\n").unwrap();
    let out = run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn interpret_writes_one_pattern_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "19");
    let model = small_model(dir.path(), &data, &[]);
    let out_dir = dir.path().join("interp");
    ok(&["interpret", "--data", s(&data), "--model", s(&model), "--held-out", "0", "--out-dir", s(&out_dir)]);
    let csv = std::fs::read_to_string(out_dir.join("patterns.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 5);
    for row in &lines[1..] {
        assert_eq!(row.split(',').count(), 2 + 12);
    }
    assert!(out_dir.join("spectra.csv").exists());
    assert!(out_dir.join("summary.txt").exists());
}

#[test]
fn interpret_rejects_var_models() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_data(dir.path(), "23");
    let model = small_model(dir.path(), &data, &["--variant", "var"]);
    let out = run(&["interpret", "--data", s(&data), "--model", s(&model)]);
    assert_eq!(out.status.code(), Some(2));
}
