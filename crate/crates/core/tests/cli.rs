//! Drives the `segfilter` binary end to end on a tiny configuration.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "scene": {"height": 32, "width": 32},
  "counts": {"labeled": 12, "unlabeled": 6, "quality": 6, "validation": 6},
  "labeled_fraction": 0.5,
  "rare_threshold": 10,
  "num_models": 2,
  "segnet": {"width": 4, "depth": 3},
  "ensemble_hyper": {"steps": 10},
  "target_hyper": {"steps": 10},
  "quality": {"hyper": {"steps": 10}},
  "quality_set": "disjoint"
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_segfilter"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
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

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = dir.join("tiny.json");
    std::fs::write(&cfg, TINY).unwrap();
    cfg
}

fn snapshot(name: &str, actual: &str) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/snapshots").join(name);
    if std::env::var_os("UPDATE_SNAPSHOTS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|_| panic!("missing snapshot {name}; rerun with UPDATE_SNAPSHOTS=1"));
    assert_eq!(actual, expected, "help text for {name} changed");
}

#[test]
fn help_snapshots() {
    snapshot("help.txt", &ok(&["--help"]));
    for cmd in [
        "gen-data",
        "train-ensemble",
        "auto-annotate",
        "train-filter",
        "filter",
        "train-target",
        "run-experiment",
        "sweep",
        "report",
        "grad-check",
    ] {
        snapshot(&format!("help_{cmd}.txt"), &ok(&[cmd, "--help"]));
    }
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data"]).status.code(), Some(1));
    assert_eq!(run(&["report", "--input", "x", "--format", "yaml"]).status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = run(&["--json-errors", "report", "--input", p(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["kind"], "data");
    assert_eq!(err["exit_code"], 2);

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"labeled_fraction": 1.5}"#).unwrap();
    let out = run(&["gen-data", "--config", p(&bad), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));

    std::fs::write(&bad, r#"{"no_such_field": 1}"#).unwrap();
    let out = run(&["gen-data", "--config", p(&bad), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));

    let out = run(&["--json-errors", "nope"]);
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["exit_code"], 1);
}

#[test]
fn grad_check_command_passes() {
    let out = ok(&["grad-check", "--cases", "3"]);
    assert!(out.contains("conv2d") && !out.contains("FAIL"), "{out}");
    let json: serde_json::Value = serde_json::from_str(&ok(&["grad-check", "--cases", "2", "--json"])).unwrap();
    assert!(json["results"].as_array().unwrap().iter().all(|r| r["passed"] == true));
}

#[test]
fn staged_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let (data, ens, qann, filt, uann, filtered, target) = (
        d.join("data"),
        d.join("ens"),
        d.join("qann"),
        d.join("filt"),
        d.join("uann"),
        d.join("filtered"),
        d.join("target"),
    );
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    assert!(data.join("manifest.json").exists());
    assert!(data.join("heldout").is_dir());

    ok(&["train-ensemble", "--config", p(&cfg), "--data", p(&data), "--out", p(&ens)]);
    assert!(ens.join("model_1").exists());

    ok(&[
        "auto-annotate", "--data", p(&data), "--ensemble", p(&ens), "--out", p(&qann),
        "--split", "quality", "--keep-members",
    ]);
    ok(&[
        "train-filter", "--config", p(&cfg), "--data", p(&data), "--annotations", p(&qann),
        "--out", p(&filt),
    ]);

    // Filtering needs member maps.
    ok(&["auto-annotate", "--data", p(&data), "--ensemble", p(&ens), "--out", p(&uann)]);
    let out = run(&["filter", "--filter", p(&filt), "--annotations", p(&uann), "--out", p(&filtered)]);
    assert_eq!(out.status.code(), Some(2));

    ok(&[
        "auto-annotate", "--data", p(&data), "--ensemble", p(&ens), "--out", p(&uann),
        "--keep-members",
    ]);
    ok(&[
        "filter", "--filter", p(&filt), "--annotations", p(&uann), "--out", p(&filtered),
        "--threshold", "0.5",
    ]);
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(uann.join("annotations.json")).unwrap()).unwrap();
    let ids = meta["ids"].as_array().unwrap();
    assert_eq!(ids.len(), 6);
    for id in ids {
        let side: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(filtered.join(format!("filtered_{id}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(side["threshold"], 0.5);
        let r = side["retention"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }

    ok(&[
        "train-target", "--config", p(&cfg), "--data", p(&data), "--labels", p(&filtered),
        "--out", p(&target),
    ]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(target.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(m["train_images"], 6 + 6);

    // Writing over an input directory is refused.
    let out = run(&["train-ensemble", "--config", p(&cfg), "--data", p(&data), "--out", p(&data)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn run_experiment_writes_run_directory_and_reports_render() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d);
    let run_dir = d.join("run");
    let table = ok(&["run-experiment", "--config", p(&cfg), "--out", p(&run_dir)]);
    assert!(table.contains("labeled_only") && table.contains("filtered"));
    for f in ["config.json", "report.json", "run_manifest.json", "checkpoints/filter"] {
        assert!(run_dir.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("run_manifest.json")).unwrap()).unwrap();
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_hash"], report["config_hash"]);
    assert_eq!(manifest["crate_version"], env!("CARGO_PKG_VERSION"));

    let report_path = run_dir.join("report.json");
    let json = ok(&["report", "--input", p(&report_path), "--format", "json"]);
    assert_eq!(serde_json::from_str::<serde_json::Value>(&json).unwrap(), report);
    let csv = ok(&["report", "--input", p(&report_path), "--format", "csv"]);
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("iteration,class,support"));
    assert_eq!(lines.count(), 6);
    assert!(ok(&["report", "--input", p(&report_path)]).contains("retention by threshold"));

    // The same dataset loaded from disk gives the same report.
    let data = d.join("data");
    ok(&["gen-data", "--config", p(&cfg), "--out", p(&data)]);
    let run2 = d.join("run2");
    ok(&["run-experiment", "--config", p(&cfg), "--data", p(&data), "--out", p(&run2), "--no-checkpoints"]);
    assert_eq!(
        std::fs::read(run_dir.join("report.json")).unwrap(),
        std::fs::read(run2.join("report.json")).unwrap()
    );
    assert!(!run2.join("checkpoints").exists());
}

#[test]
fn sweep_command() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    let table = ok(&["sweep", "--config", p(&cfg), "--fractions", "1.0,0.5", "--out", p(&out)]);
    assert_eq!(table.lines().count(), 3);
    let csv = ok(&["report", "--input", p(&out.join("sweep.json")), "--format", "csv"]);
    assert!(csv.starts_with("fraction,arm,miou\n"));
    assert!(csv.lines().any(|l| l.starts_with("0.5,filtered,")));
}
