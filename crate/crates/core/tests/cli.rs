mod common;

use std::fs;
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

use alrank::data::{save_manifest, DatasetManifest, Normalization, Sample};
use alrank::model::ParameterSet;
use common::{bin, synth_manifest};

fn alrank(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("spawn alrank")
}

fn ok(args: &[&str]) -> String {
    let out = alrank(args);
    assert!(out.status.success(), "alrank {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const QUICK: &[&str] = &["--T", "4", "--epochs", "3", "--hidden", "8", "--lr", "1e-2", "--folds", "0"];

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--n", "2000", "--seed", "7", "--out", a.to_str().unwrap()]);
    ok(&["synth", "--n", "2000", "--seed", "7", "--out", b.to_str().unwrap()]);
    let text = fs::read_to_string(a.join("manifest.jsonl")).unwrap();
    let samples = text.lines().filter(|l| l.contains("\"features\"")).count();
    assert_eq!(samples, 2000);
    assert_eq!(text, fs::read_to_string(b.join("manifest.jsonl")).unwrap());
}

#[test]
fn bad_priors_fail_with_one_line() {
    let dir = tempfile::tempdir().unwrap();
    let out = alrank(&["synth", "--priors", "0.5,0.6", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[config]"), "{err}");
    assert!(!dir.path().join("manifest.jsonl").exists());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("synth.cfg");
    fs::write(&cfg, "# small\nn = 50\nseed = 3\n").unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["synth", "--config", cfg.to_str().unwrap(), "--out", a.to_str().unwrap()]);
    ok(&["synth", "--config", cfg.to_str().unwrap(), "--n", "30", "--out", b.to_str().unwrap()]);
    let count = |p: &Path| fs::read_to_string(p.join("manifest.jsonl")).unwrap().lines().filter(|l| l.contains("\"features\"")).count();
    assert_eq!(count(&a), 50);
    assert_eq!(count(&b), 30);
}

#[test]
fn loop_sim_defaults_reach_half_the_pool() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_manifest(dir.path(), 300, 1);
    let out = dir.path().join("run");
    let mut args = vec!["loop-sim", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(QUICK);
    ok(&args);
    let last = json(&out.join("fold_0/round_06/state.json"));
    assert_eq!(last["labeling_ratio"].as_f64().unwrap(), 0.5);
    let last = &last["state"];
    let pool = last["pool_size"].as_u64().unwrap();
    let labeled = last["labeled_ids"].as_array().unwrap().len() as u64;
    assert_eq!(labeled, pool / 2);
    assert!(!out.join("fold_0/round_07").exists());
    for f in ["report.json", "accuracy_summary.csv", "accuracy_curve.csv", "selection_proportions.csv", "outputs.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn zero_iterations_is_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_manifest(dir.path(), 300, 1);
    let out = dir.path().join("run");
    let mut args = vec!["loop-sim", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap(), "--K", "0"];
    args.extend_from_slice(QUICK);
    ok(&args);
    assert!(out.join("fold_0/round_00/params.json").exists());
    assert!(!out.join("fold_0/round_01").exists());
    let report = json(&out.join("report.json"));
    let acc = report["folds"][0]["overall_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn report_against_itself_is_not_significant() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_manifest(dir.path(), 300, 1);
    let run = dir.path().join("run");
    let mut args = vec!["loop-sim", "--manifest", manifest.to_str().unwrap(), "--out", run.to_str().unwrap(), "--K", "1"];
    args.extend_from_slice(QUICK);
    ok(&args);
    let out = dir.path().join("cmp");
    let a = format!("a={}", run.display());
    let b = format!("b={}", run.display());
    ok(&["report", "--run", &a, "--run", &b, "--out", out.to_str().unwrap()]);
    let report = json(&out.join("report.json"));
    let cmp = report["mcnemar"].as_array().unwrap();
    assert!(!cmp.is_empty());
    for c in cmp {
        assert_eq!(c["result"]["b"], 0);
        assert_eq!(c["result"]["c"], 0);
        assert_eq!(c["result"]["p_value"].as_f64().unwrap(), 1.0);
    }
}

/// Feature equals the level, so the identity network ranks perfectly.
fn level_manifest(dir: &Path) -> std::path::PathBuf {
    let samples = (0..200)
        .map(|k| {
            let label = (k % 4) as u32;
            Sample {
                id: format!("s{k:03}"),
                features: vec![label as f64 + 0.001 * (k / 4) as f64],
                label,
                group: format!("g{k:03}"),
                sequence_pos: None,
                image: None,
            }
        })
        .collect();
    let m = DatasetManifest { num_levels: 4, normalization: Normalization::None, samples };
    let path = dir.join("levels.jsonl");
    save_manifest(&m, &path).unwrap();
    path
}

#[test]
fn perfect_ranker_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = level_manifest(dir.path());
    let run = dir.path().join("run");
    ok(&[
        "loop-sim", "--manifest", manifest.to_str().unwrap(), "--out", run.to_str().unwrap(),
        "--K", "0", "--hidden", "1", "--dropout", "0", "--epochs", "1", "--T", "3", "--folds", "0",
    ]);
    let path = run.join("fold_0/round_00/params.json");
    let mut params = ParameterSet::load(&path).unwrap();
    params.set_flat(&[1.0, 0.0, 1.0, 0.0]);
    params.save(&path).unwrap();

    let out = dir.path().join("eval");
    ok(&["eval", "--run", run.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    let report = json(&out.join("report.json"));
    assert_eq!(report["folds"][0]["overall_accuracy"].as_f64().unwrap(), 1.0);
    for (_, v) in report["folds"][0]["neighboring_accuracies"].as_object().unwrap() {
        assert_eq!(v.as_f64().unwrap(), 1.0);
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_manifest(dir.path(), 300, 1);
    let run = dir.path().join("run");
    let mut args = vec!["loop-sim", "--manifest", manifest.to_str().unwrap(), "--out", run.to_str().unwrap(), "--K", "0"];
    args.extend_from_slice(QUICK);
    ok(&args);
    fs::remove_dir_all(run.join("fold_0/round_00")).unwrap();
    let out = alrank(&["eval", "--run", run.to_str().unwrap(), "--out", dir.path().join("e").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(7));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[checkpoint]"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn busy_port_is_a_bind_error() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = synth_manifest(dir.path(), 200, 1);
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap().to_string();
    let session = dir.path().join("s");
    let out = alrank(&[
        "serve", "--dir", session.to_str().unwrap(), "--manifest", manifest.to_str().unwrap(),
        "--addr", &addr, "--epochs", "1", "--T", "3",
    ]);
    assert_eq!(out.status.code(), Some(10));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.starts_with("error[bind]"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}
