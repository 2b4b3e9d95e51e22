use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_lod-censor"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn synth(dir: &Path, seed: &str, extra: &[&str]) {
    let mut args = vec![
        "synth", "--seed", seed, "--out", "w", "--n-samples", "36", "--n-cases", "14",
        "--n-clusters", "5", "--informative", "2", "--zero-variance", "1", "--censoring", "0.5",
    ];
    args.extend_from_slice(extra);
    run(&args, dir);
}

fn manifest(path: &Path) -> Vec<(String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

#[test]
fn internal_run_writes_reports_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "3", &[]);
    let common = [
        "--peaks", "w/peaks.csv", "--labels", "w/labels.csv", "--lod-policy", "given",
        "--method", "CCA,CR_PREP", "--splits", "2", "--seed", "7",
    ];
    for out in ["a", "b"] {
        let mut args = vec!["internal"];
        args.extend_from_slice(&common);
        args.extend_from_slice(&["--out", out]);
        run(&args, d);
    }
    for f in ["report.csv", "summary.csv", "failures.csv"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap());
    }
    let report = fs::read_to_string(d.join("a/report.csv")).unwrap();
    assert!(report.starts_with("method,split,error_rate,brier,deviance,auc,n_val,lambda,F"));
    assert_eq!(report.lines().count(), 1 + 2 * 2);
    let m = manifest(&d.join("a/manifest.txt"));
    assert!(m.contains(&("seed".into(), "7".into())));
    assert!(m.contains(&("command".into(), "internal".into())));
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "4", &[]);
    fs::write(d.join("run.toml"), "splits = 3\nseed = 11\nmethod = \"LOD\"\n").unwrap();
    run(
        &[
            "internal", "--peaks", "w/peaks.csv", "--labels", "w/labels.csv", "--lod-policy", "given",
            "--splits", "1", "--method", "BC", "--config", "run.toml", "--out", "o",
        ],
        d,
    );
    let report = fs::read_to_string(d.join("o/report.csv")).unwrap();
    let body: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(body.len(), 3);
    assert!(body.iter().all(|l| l.starts_with("LOD,")));
    assert!(manifest(&d.join("o/manifest.txt")).contains(&("seed".into(), "11".into())));
}

#[test]
fn summarize_writes_matrices_with_metadata() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "5", &[]);
    run(
        &["summarize", "--peaks", "w/peaks.csv", "--lod-policy", "given", "--method", "BC,CR_PRED_U", "--out", "s"],
        d,
    );
    let bc = fs::read_to_string(d.join("s/summary_BC.csv")).unwrap();
    assert_eq!(bc.lines().next().unwrap(), "sample_id,cluster_1,cluster_2,cluster_3,cluster_4,cluster_5");
    assert_eq!(bc.lines().count(), 37);
    assert!(d.join("s/summary_CR_PRED_U.csv.meta").exists());
    let fits = fs::read_to_string(d.join("s/fits_CR_PRED_U.csv")).unwrap();
    assert!(fits.starts_with("cluster_id,alpha,beta,tau2,sigma2,loglik,converged"));
}

#[test]
fn external_and_selection_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "6", &["--val-shift", "0.3"]);
    run(
        &[
            "external", "--peaks", "w/peaks.csv", "--labels", "w/labels.csv",
            "--val-peaks", "w/val_peaks.csv", "--val-labels", "w/val_labels.csv",
            "--lod-policy", "given", "--method", "CR_PRED,CR_REEST", "--out", "e",
        ],
        d,
    );
    let summary = fs::read_to_string(d.join("e/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);

    run(
        &[
            "select", "--peaks", "w/peaks.csv", "--labels", "w/labels.csv", "--lod-policy", "given",
            "--method", "CR_PREP", "--fractions", "1,0.4,cv", "--splits", "2",
            "--lambda-grid", "log:0.01:100:5", "--out", "sel",
        ],
        d,
    );
    let sel = fs::read_to_string(d.join("sel/selection.csv")).unwrap();
    assert!(sel.starts_with("arm,split,F,n_kept,"));
    assert_eq!(sel.lines().count(), 1 + 3 * 2);
}

#[test]
fn report_rebuilds_the_summary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    synth(d, "8", &[]);
    run(
        &[
            "internal", "--peaks", "w/peaks.csv", "--labels", "w/labels.csv", "--lod-policy", "given",
            "--method", "LOD,BC", "--splits", "3", "--out", "r",
        ],
        d,
    );
    run(&["report", "--input", "r/report.csv", "--out", "again"], d);
    assert_eq!(
        fs::read(d.join("r/summary.csv")).unwrap(),
        fs::read(d.join("again/summary.csv")).unwrap()
    );
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.csv"), "sample_id,peak_id,cluster_id,intensity,observed\na,1,1,2.0,7\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_lod-censor"))
        .args(["ingest", "--peaks", "bad.csv", "--out", "x"])
        .current_dir(d)
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("observed"));
}
