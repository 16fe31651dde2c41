use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fedlora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fedlora"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn config(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_outputs_and_repeats_byte_for_byte() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let smoke = config("smoke.toml");
    for dir in [&d1, &d2] {
        let out = fedlora(&["--threads", "1", "run", "--config", &smoke, "--out-dir", s(dir.path()), "--seeds", "3"]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["results.csv", "transcript.json", "comm.csv", "comm_report.json"] {
        let a = fs::read(d1.path().join(file)).unwrap();
        assert_eq!(a, fs::read(d2.path().join(file)).unwrap(), "{file} differs");
    }
    let results = fs::read_to_string(d1.path().join("results.csv")).unwrap();
    assert!(results.starts_with("strategy,testset,task,scheme,p,r,f1,ci_lo,ci_hi,seed\n"));
    // 6 strategies x 2 test sets x 2 tasks x 2 schemes
    assert_eq!(results.lines().count(), 1 + 48);
    let comm = fs::read_to_string(d1.path().join("comm.csv")).unwrap();
    assert!(comm.starts_with("round,client,direction,params,bytes\n"));
    // 10 rounds x 2 clients x 2 directions
    assert_eq!(comm.lines().count(), 1 + 40);
}

#[test]
fn bad_config_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "seed = 1\nmystery = true\n").unwrap();
    let out = fedlora(&["run", "--config", s(&path), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("results.csv").exists());

    let missing = fedlora(&["run", "--config", s(&dir.path().join("absent.toml"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn comm_report_prints_preset_figures() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedlora(&["comm-report", "--config", &config("two_site.toml"), "--out-dir", s(dir.path())]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for needle in ["99.48%", "1.25 GB", "29.92 GB", "239 GB"] {
        assert!(text.contains(needle), "missing {needle} in:\n{text}");
    }
    let csv = fs::read_to_string(dir.path().join("comm_report.csv")).unwrap();
    assert!(csv.contains("reduction_pct,99.48"));

    let three = fedlora(&["comm-report", "--config", &config("comm_three_site.toml"), "--out-dir", s(dir.path())]);
    let text = String::from_utf8(three.stdout).unwrap();
    assert!(text.contains("1.88 GB") && text.contains("359 GB"), "{text}");
}

#[test]
fn comm_report_without_preset_is_a_config_error() {
    let out = fedlora(&["comm-report", "--config", &config("noisy_three_site.toml")]);
    assert_eq!(out.status.code(), Some(2));
}

fn synthetic_results(path: &Path, f1s: &[f64]) {
    let mut text = String::from("strategy,testset,task,scheme,p,r,f1,ci_lo,ci_hi,seed\n");
    for (seed, f1) in f1s.iter().enumerate() {
        text += &format!("fed-medlora-plus,a,tagging,strict,{f1},{f1},{f1},,,{seed}\n");
    }
    fs::write(path, text).unwrap();
}

#[test]
fn compare_separated_samples_is_significant() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    synthetic_results(&a, &[0.81, 0.82, 0.83, 0.84, 0.85, 0.86]);
    synthetic_results(&b, &[0.71, 0.72, 0.73, 0.74, 0.75, 0.76]);
    let out = fedlora(&["compare", s(&a), s(&b), "--out-dir", s(dir.path())]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let row = csv.lines().nth(1).unwrap();
    let p: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
    assert!(p < 0.05, "{row}");

    let same = fedlora(&["compare", s(&a), s(&a), "--out-dir", s(dir.path())]);
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert!(same.status.success());
    assert!(csv.lines().nth(1).unwrap().ends_with(",1.0"), "{csv}");
}

#[test]
fn compare_mismatched_keys_fails() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    synthetic_results(&a, &[0.5, 0.6]);
    fs::write(&b, "strategy,testset,task,scheme,p,r,f1,ci_lo,ci_hi,seed\nzero-shot,a,tagging,strict,0,0,0,,,0\n").unwrap();
    let out = fedlora(&["compare", s(&a), s(&b), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing from"));
}

#[test]
fn scale_study_writes_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = fedlora(&[
        "scale-study", "--config", &config("smoke.toml"), "--out-dir", s(dir.path()), "--seeds", "1", "--k", "1,2",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("scale.csv")).unwrap();
    assert!(csv.starts_with("k,strategy,task,scheme,"));
    // 2 k values x 3 strategies x 2 tasks x 2 schemes
    assert_eq!(csv.lines().count(), 1 + 24);
}
