use std::path::Path;
use std::process::{Command, Stdio};

use serde_json::Value;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fairproxy"));
    cmd.env_remove("FAIRPROXY_SEED").stderr(Stdio::null());
    cmd
}

fn run_in(dir: &Path, args: &[&str]) -> i32 {
    bin().current_dir(dir).args(args).status().unwrap().code().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TABLES: [&str; 4] = ["--surnames", "surnames.csv", "--geo", "geo.csv"];

fn with_tables<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut all = args.to_vec();
    all.extend(TABLES);
    all
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run_in(d, &["--version"]), 0);
    assert_eq!(run_in(d, &["estimate", "--bogus"]), 1);
    assert_eq!(run_in(d, &[]), 1);
    // Missing seed is a usage error, a missing file is an I/O error.
    assert_eq!(run_in(d, &["simulate", "--out-dir", "out"]), 1);
    assert_eq!(run_in(d, &["verify-theorems", "--out", "v.json", "--seed", "1", "--config", "missing.toml"]), 2);
    assert_eq!(run_in(d, &["estimate", "--method", "bayes", "--proxy", "nonsense", "--input", "x", "--out", "y"]), 1);
}

#[test]
fn seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = bin()
        .current_dir(dir.path())
        .env("FAIRPROXY_SEED", "9")
        .args(["simulate", "--n", "200", "--out-dir", "out"])
        .status()
        .unwrap();
    assert!(status.success());
    assert_eq!(json(&dir.path().join("out/manifest.json"))["seed"], 9);
}

#[test]
fn full_pipeline_writes_reports_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(
        run_in(d, &["simulate", "--n", "6000", "--seed", "4", "--out-dir", ".", "--train-fraction", "0.6"]),
        0
    );
    for f in ["surnames.csv", "geo.csv", "supplemental.csv", "joint_table.csv", "oracle.json", "train.csv", "test.csv"] {
        assert!(d.join(f).exists(), "{f}");
    }
    assert_eq!(json(&d.join("oracle.json"))["schema"], 1);

    assert_eq!(run_in(d, &with_tables(&["ingest-check", "--supplemental", "supplemental.csv", "--out", "ingest.json"])), 0);
    let ingest = json(&d.join("ingest.json"));
    assert_eq!(ingest["supplemental"]["n"], 6000);
    assert_eq!(ingest["supplemental"]["unknown_geos"], 0);

    assert_eq!(run_in(d, &with_tables(&["predict-bisg", "--input", "test.csv", "--out", "bisg.csv"])), 0);
    let preds = std::fs::read_to_string(d.join("bisg.csv")).unwrap();
    assert!(preds.starts_with("id,r1,r2,r3\n"));

    let fit = ["fit-cbisg", "--train", "train.csv", "--eta", "tune", "--grid", "0:1:0.25", "--model-out", "cbisg.csv"];
    assert_eq!(run_in(d, &with_tables(&fit)), 0);
    assert_eq!(
        run_in(d, &with_tables(&["fit-micsg", "--base", "cbisg:cbisg.csv", "--train", "train.csv", "--model-out", "micsg.csv"])),
        0
    );
    assert!(d.join("micsg.csv.json").exists());
    assert_eq!(
        run_in(d, &["predict-micsg", "--model", "micsg.csv", "--input", "test.csv", "--context", "0", "--out", "m.csv"]),
        0
    );
    assert_eq!(run_in(d, &["predict-micsg", "--model", "micsg.csv", "--input", "test.csv", "--context", "2", "--out", "m.csv"]), 1);

    for (proxy, name) in [("bisg", "b"), ("cbisg:cbisg.csv", "c"), ("micsg:micsg.csv", "m"), ("oracle:joint_table.csv", "o")] {
        let est = format!("est_{name}.json");
        let diag = format!("diag_{name}.json");
        assert_eq!(run_in(d, &with_tables(&["estimate", "--method", "bayes", "--proxy", proxy, "--input", "test.csv", "--out", &est])), 0);
        assert_eq!(run_in(d, &with_tables(&["diagnose", "--proxy", proxy, "--input", "test.csv", "--out", &diag])), 0);
        let report = json(&d.join(&est));
        assert_eq!(report["schema"], 1);
        assert_eq!(report["proxy"], proxy.split(':').next().unwrap());
        assert!(report["per_race"]["r1"]["mu"].is_f64());
        let manifest = json(&d.join(format!("{est}.manifest.json")));
        assert_eq!(manifest["subcommand"], "estimate");
        assert!(manifest["inputs"].as_array().unwrap().iter().all(|i| i["sha256"].as_str().unwrap().len() == 64));
    }
    assert_eq!(run_in(d, &with_tables(&["estimate", "--method", "weighted", "--input", "test.csv", "--out", "w.json"])), 1);
    assert_eq!(run_in(d, &with_tables(&["estimate", "--method", "true", "--input", "test.csv", "--out", "t.json"])), 0);

    assert_eq!(
        run_in(d, &["emit-figure-data", "--reports", "est_c.json", "t.json", "diag_b.json", "--out", "fig.csv"]),
        0
    );
    let fig = std::fs::read_to_string(d.join("fig.csv")).unwrap();
    let mut lines = fig.lines();
    assert_eq!(lines.next(), Some("figure,group,method,x,y,size"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.iter().filter(|l| l.starts_with("rates,")).count(), 6);
    assert_eq!(rows.iter().filter(|l| l.starts_with("composition,")).count(), 3);
    assert!(rows.iter().any(|l| l.starts_with("consistency,")));
}

#[test]
fn split_flags_partition_the_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run_in(d, &["simulate", "--n", "3000", "--seed", "2", "--out-dir", "."]), 0);
    let mut total = 0;
    for part in ["train", "test"] {
        let out = format!("{part}.json");
        let args = with_tables(&[
            "estimate", "--method", "true", "--input", "supplemental.csv", "--split-fraction", "0.3", "--split-part", part,
            "--seed", "5", "--out", &out,
        ]);
        assert_eq!(run_in(d, &args), 0);
        total += json(&d.join(&out))["n"].as_u64().unwrap();
    }
    assert_eq!(total, 3000);
    let args = with_tables(&["estimate", "--method", "true", "--input", "supplemental.csv", "--split-fraction", "0.3", "--out", "x.json"]);
    assert_eq!(run_in(d, &args), 1);
}

#[test]
fn verify_theorems_reports_no_counterexamples() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run_in(d, &["verify-theorems", "--instances", "5", "--seed", "3", "--out", "v.json", "--details"]), 0);
    let v = json(&d.join("v.json"));
    assert_eq!(v["forward_counterexamples"], 0);
    assert_eq!(v["converse_counterexamples"], 0);
    let results = v["results"].as_array().unwrap();
    assert_eq!(results.len(), 5);
    assert!(results.iter().all(|r| r["passed"] == true && r["plug_ins"].as_array().unwrap().len() == 3));
    assert_eq!(v["checks"].as_array().unwrap().len(), 5);
}
