use std::path::Path;
use std::process::{Command, Output};

use ntk_core::kernel_file::{payload_bytes, read_kernel};

fn ntk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ntk")).args(args).output().expect("spawn ntk")
}

fn ok(args: &[&str]) -> String {
    let out = ntk(args);
    assert!(
        out.status.success(),
        "ntk {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn single_pixel_cntk_matches_fc_ntk() {
    let dir = tempfile::tempdir().unwrap();
    let conv = dir.path().join("conv.cntk");
    let fc = dir.path().join("fc.cntk");
    let data = ["--sphere", "6", "--shape", "1x1x1", "--data-seed", "3"];
    let mut a = vec!["kernel", "--kernel", "cntk-vanilla", "--depth", "2", "--filter-size", "1", "--out", path_str(&conv)];
    a.extend(data);
    ok(&a);
    let mut b = vec!["kernel", "--kernel", "fc-ntk", "--depth", "2", "--out", path_str(&fc)];
    b.extend(data);
    ok(&b);
    let (kc, _) = read_kernel(&conv).unwrap();
    let (kf, _) = read_kernel(&fc).unwrap();
    assert_eq!(kc.meta().input_checksum, kf.meta().input_checksum);
    let diff = (kc.entries() - kf.entries()).abs().max();
    assert!(diff <= 1e-12 * kf.max_abs(), "{diff}");
}

#[test]
fn rerun_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let files = [dir.path().join("a.cntk"), dir.path().join("b.cntk")];
    for (f, threads) in files.iter().zip(["1", "3"]) {
        ok(&[
            "kernel", "--surrogate-cifar", "12", "--downsample", "8", "--normalize", "--kernel", "cntk-gap",
            "--depth", "3", "--threads", threads, "--out", path_str(f),
        ]);
    }
    let (a, ma) = read_kernel(&files[0]).unwrap();
    let (b, mb) = read_kernel(&files[1]).unwrap();
    assert_eq!(payload_bytes(&a), payload_bytes(&b));
    assert_eq!(ma.payload_sha256, mb.payload_sha256);
    assert_eq!(ma.params["resolved"]["filter_size"], 3);
    assert_eq!(ma.params["dataset"]["shape"]["width"], 4);
}

#[test]
fn missing_input_exits_with_two() {
    let out = ntk(&["kernel", "--cifar", "/definitely/not/here.bin", "--kernel", "fc-ntk", "--depth", "1", "--out", "/tmp/unused.cntk"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("not/here.bin"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(ntk(&["kernel", "--kernel", "fc-ntk", "--depth", "1", "--out", "x"]).status.code(), Some(2));
    let out = ntk(&["kernel", "--sphere", "3", "--kernel", "fc-ntk", "--depth", "1", "--filter-size", "3", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ntk(&["kernel", "--sphere", "3", "--kernel", "cntk-gap", "--depth", "1", "--filter-size", "2", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn empty_test_set_is_an_error() {
    let out = ntk(&["fit-predict", "--sphere", "10", "--kernel", "fc-ntk", "--depth", "1", "--train", "10", "--test", "0"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty"));
}

#[test]
fn fit_predict_reuses_kernel_file() {
    let dir = tempfile::tempdir().unwrap();
    let k = dir.path().join("train.cntk");
    let (r1, r2) = (dir.path().join("r1.json"), dir.path().join("r2.json"));
    // generated points are prefix-stable, so a 20-point Gram is the training
    // block of the 25-point dataset below
    ok(&["kernel", "--sphere", "20", "--shape", "1x1x4", "--kernel", "fc-ntk", "--depth", "2", "--out", path_str(&k)]);
    let split = ["fit-predict", "--sphere", "25", "--shape", "1x1x4", "--kernel", "fc-ntk", "--depth", "2", "--train", "20", "--test", "5"];
    let mut a = split.to_vec();
    a.extend(["--out", path_str(&r1)]);
    assert!(ok(&a).contains("accuracy"));
    let mut b = split.to_vec();
    b.extend(["--out", path_str(&r2), "--train-kernel", path_str(&k)]);
    ok(&b);
    let read = |p: &Path| -> serde_json::Value { serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap() };
    let (v1, v2) = (read(&r1), read(&r2));
    assert_eq!(v1["report"], v2["report"]);
    assert_eq!(v1["manifest"]["command"], "fit-predict");
    assert_eq!(v1["report"]["n_test"], 5);
}

#[test]
fn mismatched_kernel_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let k = dir.path().join("train.cntk");
    ok(&["kernel", "--sphere", "20", "--data-seed", "1", "--kernel", "fc-ntk", "--depth", "2", "--out", path_str(&k)]);
    let base = ["fit-predict", "--sphere", "25", "--kernel", "fc-ntk", "--train", "20", "--test", "5", "--train-kernel", path_str(&k)];
    let mut wrong_data = base.to_vec();
    wrong_data.extend(["--depth", "2"]);
    let out = ntk(&wrong_data);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("different training inputs"));
    let mut wrong_depth = base.to_vec();
    wrong_depth.extend(["--depth", "3", "--data-seed", "1"]);
    assert_eq!(ntk(&wrong_depth).status.code(), Some(2));
}

#[test]
fn verify_ntk_small() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("v.json");
    let stdout = ok(&["verify-ntk", "--depth", "2", "--widths", "16,1024", "--seeds", "8", "--out", path_str(&out)]);
    assert!(stdout.contains("decreases with width: true"));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["report"]["rows"].as_array().unwrap().len(), 2);
}

#[test]
fn verify_equivalence_reports_failure_with_exit_one() {
    // a narrow network cannot stay within a tiny tolerance
    let out = ntk(&[
        "verify-equivalence", "--width", "16", "--seeds", "2", "--n-train", "4", "--n-test", "2", "--tolerance", "1e-9",
        "--kappa", "1",
    ]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("0/2 seeds"));
}

#[test]
fn surrogate_gap_classification_beats_chance() {
    let stdout = ok(&[
        "fit-predict", "--surrogate-cifar", "1500", "--data-seed", "2024", "--select-classes", "0,1", "--downsample",
        "4", "--normalize", "--kernel", "cntk-gap", "--depth", "4", "--train", "200", "--test", "100",
    ]);
    let line = stdout.lines().find(|l| l.starts_with("accuracy")).unwrap();
    let lower: f64 = line.split("lower bound ").nth(1).unwrap().trim_end_matches(')').parse().unwrap();
    assert!(lower > 0.5, "{stdout}");
}

#[test]
fn rf_compare_small() {
    let stdout = ok(&[
        "rf-compare", "--surrogate-cifar", "200", "--select-classes", "0,1", "--downsample", "8", "--normalize",
        "--kernel", "cntk-vanilla", "--depth", "2", "--channels", "8,64", "--train", "20", "--test", "10",
        "--deviation-subset", "4", "--deviation-seeds", "4",
    ]);
    assert!(stdout.contains("exact accuracy"));
    assert_eq!(stdout.lines().filter(|l| l.trim_start().starts_with("8 ") || l.trim_start().starts_with("64 ")).count(), 2);
}
