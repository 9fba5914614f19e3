use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn volseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_volseg"))
        .args(args)
        .env_remove("VOLSEG_OUT")
        .output()
        .expect("run volseg")
}

fn ok(args: &[&str]) -> String {
    let out = volseg(args);
    assert!(
        out.status.success(),
        "volseg {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn analyze_reports_tap_fields() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&["analyze", "--arch", "net3", "--out-dir", s(dir.path())]);
    assert!(text.contains("short_path"));
    let taps = fs::read_to_string(dir.path().join("analyze_taps.csv")).unwrap();
    assert!(taps.contains("net3,short_path,short_conv8,17"));
    assert!(taps.contains("net3,long_path,long_up0,136"));
    assert!(!taps.contains("net1"));
}

#[test]
fn single_resolution_variant_is_smaller() {
    let dir = tempfile::tempdir().unwrap();
    let params = |single: bool| -> u64 {
        let mut args = vec!["analyze", "--arch", "net2", "--out-dir", s(dir.path())];
        if single {
            args.push("--single-res");
        }
        ok(&args);
        let csv = fs::read_to_string(dir.path().join("analyze_summary.csv")).unwrap();
        csv.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse().unwrap()
    };
    assert!(params(true) < params(false));
}

#[test]
fn analyze_accepts_dumped_graph() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["analyze", "--arch", "net1", "--dump-graph", "--out-dir", s(dir.path())]);
    let graph = dir.path().join("net1.json");
    let again = dir.path().join("again");
    ok(&["analyze", "--graph", s(&graph), "--out-dir", s(&again)]);
    assert_eq!(
        fs::read_to_string(dir.path().join("analyze_summary.csv")).unwrap(),
        fs::read_to_string(again.join("analyze_summary.csv")).unwrap()
    );
}

#[test]
fn evaluate_identical_volumes_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["phantom", "--n", "2", "--size", "32", "--out-dir", s(&data)]);
    let label = data.join("subject_000_label.vseg");
    let out = dir.path().join("eval");
    ok(&["evaluate", "--pred", s(&label), "--truth", s(&label), "--out-dir", s(&out)]);
    let csv = fs::read_to_string(out.join("evaluation.csv")).unwrap();
    let regions: Vec<&str> = csv.lines().filter(|l| l.starts_with("region,")).collect();
    assert_eq!(regions.len(), 3);
    for line in regions {
        assert_eq!(line.split(',').nth(2), Some("1.000000"), "{line}");
    }
}

#[test]
fn train_predict_evaluate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["phantom", "--n", "3", "--size", "32", "--seed", "3", "--out-dir", s(&data)]);
    ok(&[
        "train", "--arch", "net3", "--single-res", "--filter-base", "2", "--patch-size", "16",
        "--batch-size", "2", "--patches-per-epoch", "2", "--epochs", "2", "--data-dir", s(&data),
        "--out-dir", s(&run),
    ]);
    let curves = fs::read_to_string(run.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 3);
    assert!(curves.starts_with("epoch,train_loss,val_loss,voxels\n"));
    assert!(run.join("timing.csv").exists() && run.join("split.json").exists());

    let pred = dir.path().join("pred.vseg");
    let summary = ok(&[
        "predict", "--checkpoint", s(&run.join("model.ckpt")), "--input",
        s(&data.join("subject_000_image.vseg")), "--tile-size", "16", "--halo", "8", "--out", s(&pred),
    ]);
    assert!(summary.starts_with("class,voxels,components"));
    let eval = dir.path().join("eval");
    ok(&[
        "evaluate", "--pred", s(&pred), "--truth", s(&data.join("subject_000_label.vseg")), "--out-dir", s(&eval),
    ]);
    assert!(eval.join("evaluation.txt").exists());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["phantom", "--n", "2", "--size", "32", "--out-dir", s(&data)]);
    let base = [
        "train", "--arch", "net3", "--single-res", "--filter-base", "2", "--patch-size", "16",
        "--batch-size", "2", "--patches-per-epoch", "2", "--epochs", "3", "--split-ratio", "0.5",
        "--data-dir", s(&data),
    ];
    let full = dir.path().join("full");
    let mut args = base.to_vec();
    args.extend(["--out-dir", s(&full)]);
    ok(&args);
    let resumed = dir.path().join("resumed");
    let ck = full.join("epoch_001.ckpt");
    let mut args = base.to_vec();
    args.extend(["--out-dir", s(&resumed), "--resume", s(&ck)]);
    ok(&args);
    for f in ["curves.csv", "epoch_003.ckpt", "model.ckpt"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn sample_stats_compares_strategies() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["sample-stats", "--size", "32", "--n-patches", "200", "--out-dir", s(dir.path())]);
    let csv = fs::read_to_string(dir.path().join("sample_stats.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("class,true,fg_bg_balanced,uniform,equiprobable_classes"));
    assert_eq!(lines.count(), 5);
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    assert_eq!(volseg(&["bogus"]).status.code(), Some(2));
    assert_eq!(volseg(&["analyze", "--arch", "net9"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.vseg");
    let out = volseg(&["evaluate", "--pred", s(&missing), "--truth", s(&missing), "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.vseg"));
    let out = volseg(&["phantom", "--n", "1", "--out-dir", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}
