use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ear_core::clustering::KMeans;
use ear_core::synth::duplicated_instance;
use ear_harness::tensor::{Dtype, TensorFile, HEADER_LEN};
use ear_harness::CSV_HEADER;
use serde_json::Value;
use tempfile::TempDir;

fn ear(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ear"))
        .args(args)
        .output()
        .expect("spawn ear")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn write_config(dir: &TempDir, name: &str, json: &str) -> PathBuf {
    let p = dir.path().join(name);
    fs::write(&p, json).unwrap();
    p
}

fn gen(dir: &TempDir, json: &str, seed: u64) -> PathBuf {
    let cfg = write_config(dir, &format!("gen{seed}.json"), json);
    let t = dir.path().join(format!("t{seed}.qkvt"));
    let out = ear(&["gen", s(&t), "--config", s(&cfg), "--seed", &seed.to_string()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    t
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{"nQ":64,"nK":96,"d":8}"#;

#[test]
fn golden_csv_header() {
    let golden = fs::read_to_string("tests/golden/sweep_header.csv").unwrap();
    assert_eq!(golden.trim_end(), CSV_HEADER.join(","));
    let dir = TempDir::new().unwrap();
    let t = gen(&dir, SMALL, 1);
    let out = ear(&["sweep", s(&t), "--density-grid", "0.5", "--seed", "2"]);
    assert_eq!(code(&out), 0);
    assert_eq!(stdout(&out).lines().next().unwrap(), golden.trim_end());
}

#[test]
fn gen_tiny_instance_is_deterministic() {
    let dir = TempDir::new().unwrap();
    let json = r#"{"nQ":1,"nK":1,"d":1}"#;
    let a = fs::read(gen(&dir, json, 0)).unwrap();
    let cfg = write_config(&dir, "again.json", json);
    let again = dir.path().join("again.qkvt");
    assert_eq!(code(&ear(&["gen", s(&again), "--config", s(&cfg), "--seed", "0"])), 0);
    let b = fs::read(&again).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), HEADER_LEN + 3 * 8);
    let parsed = TensorFile::from_bytes(&a).unwrap();
    assert_eq!(parsed.to_bytes().unwrap(), a);
}

#[test]
fn gen_single_precision_writes_f32() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.json", r#"{"nQ":4,"nK":5,"d":3,"precision":"single"}"#);
    let t = dir.path().join("t.qkvt");
    assert_eq!(code(&ear(&["gen", s(&t), "--config", s(&cfg)])), 0);
    let f = TensorFile::read(&t).unwrap();
    assert_eq!(f.dtype, Dtype::F32);
    assert_eq!(fs::metadata(&t).unwrap().len() as usize, HEADER_LEN + (12 + 15 + 15) * 4);
}

#[test]
fn gen_blobs_are_recoverable() {
    let dir = TempDir::new().unwrap();
    let d = 8;
    let t = gen(
        &dir,
        r#"{"nQ":200,"nK":200,"d":8,"blobs":{"qBlobs":2,"kBlobs":2,"sigma":0.05}}"#,
        4,
    );
    let inst = TensorFile::read(&t).unwrap().to_instance().unwrap();
    let fit = KMeans::new(2, 0).with_restarts(3).fit(&inst.k).unwrap();
    assert!(fit.model.quality(&inst.k).delta_sq <= 0.01 * d as f64);
}

#[test]
fn run_is_byte_identical_without_timing() {
    let dir = TempDir::new().unwrap();
    let t = gen(&dir, SMALL, 2);
    let a = ear(&["run", s(&t), "--seed", "7", "--no-timing"]);
    let b = ear(&["run", s(&t), "--seed", "7", "--no-timing", "--workers", "1"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert!(!stdout(&a).contains("timing"));
    let timed = ear(&["run", s(&t), "--seed", "7"]);
    assert!(stdout(&timed).contains("\"timing\""));
}

#[test]
fn run_emits_every_record_field() {
    let dir = TempDir::new().unwrap();
    let t = gen(&dir, SMALL, 3);
    let cfg = write_config(&dir, "c.json", r#"{"seeds":[1,2,3]}"#);
    let out = ear(&["run", s(&t), "--config", s(&cfg), "--no-timing"]);
    let lines: Vec<Value> = stdout(&out)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 3);
    for (line, seed) in lines.iter().zip([1, 2, 3]) {
        for key in [
            "policy",
            "density",
            "relaxedObjective",
            "mapMse",
            "outputMse",
            "flops",
            "flopBreakdown",
            "seed",
            "cQ",
            "cK",
            "config",
        ] {
            assert!(line.get(key).is_some(), "missing {key}");
        }
        assert_eq!(line["seed"], seed);
        assert_eq!(line["config"]["nQ"], 64);
    }
}

#[test]
fn run_at_full_density_is_exact() {
    let dir = TempDir::new().unwrap();
    let t = gen(&dir, SMALL, 4);
    let cfg = write_config(&dir, "c.json", r#"{"rho":1.0}"#);
    let out = ear(&["run", s(&t), "--config", s(&cfg), "--no-timing"]);
    let v: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["density"], 1.0);
    assert!(v["mapMse"].as_f64().unwrap() <= 1e-18);
}

#[test]
fn preset_defaults_beat_dropping_at_matched_density() {
    let dir = TempDir::new().unwrap();
    let t = gen(&dir, r#"{"nQ":256,"nK":256,"d":16}"#, 5);
    let run = |policy: &str| -> Value {
        let out = ear(&["run", s(&t), "--preset", "paper", "--policy", policy, "--no-timing"]);
        assert_eq!(code(&out), 0);
        serde_json::from_str(stdout(&out).trim()).unwrap()
    };
    let ea = run("errorAwareCompensated");
    let drop = run("topPDrop");
    assert_eq!(ea["density"], drop["density"]);
    assert!(ea["mapMse"].as_f64().unwrap() < drop["mapMse"].as_f64().unwrap());
}

#[test]
fn sweep_rows_and_endpoints() {
    let dir = TempDir::new().unwrap();
    let t = gen(&dir, SMALL, 6);
    let cfg = write_config(&dir, "c.json", r#"{"seeds":[0,1,2,3,4,5,6,7,8,9]}"#);
    let out = ear(&[
        "sweep",
        s(&t),
        "--config",
        s(&cfg),
        "--density-grid",
        "0,0.25,0.5,0.75,1",
        "--workers",
        "3",
    ]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 150);
    for r in rows.iter().filter(|r| &r[0] == "errorAwareCompensated") {
        let (density, map_mse): (f64, f64) = (r[1].parse().unwrap(), r[3].parse().unwrap());
        if density == 1.0 {
            assert!(map_mse <= 1e-18);
        }
    }
    let serial = ear(&["sweep", s(&t), "--config", s(&cfg), "--density-grid", "0,0.25,0.5,0.75,1", "--workers", "1"]);
    assert_eq!(serial.stdout, out.stdout);
}

#[test]
fn verify_degenerate_instance() {
    let dir = TempDir::new().unwrap();
    let dup = duplicated_instance(4, 8, 6, 6, 1.0, 3).unwrap();
    let t = dir.path().join("dup.qkvt");
    TensorFile::from_instance(&dup.instance, Dtype::F64).write(&t).unwrap();
    let cfg = write_config(&dir, "c.json", r#"{"cQ":4,"cK":8,"rho":0.3,"kmeansRestarts":3}"#);
    let out = ear(&["verify", s(&t), "--config", s(&cfg), "--no-timing"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let v: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert_eq!(v["bound"]["residualTerm"], 0.0);
    assert_eq!(v["pass"], true);
}

#[test]
fn verify_reports_both_precisions() {
    let dir = TempDir::new().unwrap();
    let t = gen(&dir, SMALL, 7);
    for (precision, tol) in [("double", Some(1e-9)), ("single", None)] {
        let out = ear(&["verify", s(&t), "--precision", precision, "--no-timing"]);
        assert_eq!(code(&out), 0);
        let v: Value = serde_json::from_str(stdout(&out).trim()).unwrap();
        let check = &v["executorVsReference"];
        assert!(check["maxAbsDiff"].as_f64().unwrap() <= check["tolerance"].as_f64().unwrap());
        if let Some(tol) = tol {
            assert_eq!(check["tolerance"].as_f64().unwrap(), tol);
        }
    }
}

#[test]
fn exit_codes() {
    let dir = TempDir::new().unwrap();
    let t = gen(&dir, SMALL, 8);
    let bad_field = write_config(&dir, "bad.json", r#"{"rho":2.0}"#);
    let unknown = write_config(&dir, "unknown.json", r#"{"rhoo":0.5}"#);
    let tiny_oracle = write_config(&dir, "tiny.json", r#"{"oracleMaxEntries":100}"#);
    let garbage = dir.path().join("garbage.qkvt");
    fs::write(&garbage, b"not a tensor").unwrap();

    let out = ear(&["run", s(&t), "--config", s(&bad_field)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("`rho`"));
    assert_eq!(code(&ear(&["run", s(&t), "--config", s(&unknown)])), 2);
    assert_eq!(code(&ear(&["run", s(&t), "--policy", "nope"])), 2);
    assert_eq!(code(&ear(&["sweep", s(&t), "--density-grid", ""])), 2);
    assert_eq!(code(&ear(&["sweep", s(&t)])), 2);
    assert_eq!(code(&ear(&["gen", s(&dir.path().join("x.qkvt"))])), 2);
    assert_eq!(code(&ear(&["run", s(&garbage)])), 3);
    assert_eq!(code(&ear(&["run", s(&dir.path().join("missing.qkvt"))])), 3);
    assert_eq!(code(&ear(&["sweep", s(&t), "--config", s(&tiny_oracle), "--density-grid", "0.5"])), 4);
    assert_eq!(code(&ear(&["verify", s(&t), "--config", s(&tiny_oracle)])), 4);
    assert_eq!(
        code(&ear(&["run", s(&t), "--config", s(&tiny_oracle), "--policy", "oracleKnapsack"])),
        4
    );
    let skipped = ear(&["run", s(&t), "--config", s(&tiny_oracle), "--no-timing"]);
    assert_eq!(code(&skipped), 0);
    assert!(stdout(&skipped).contains("\"mapMse\":null"));
}

#[test]
fn shape_conflict_is_an_input_error() {
    let dir = TempDir::new().unwrap();
    let t = gen(&dir, SMALL, 9);
    let cfg = write_config(&dir, "c.json", r#"{"nQ":65}"#);
    assert_eq!(code(&ear(&["run", s(&t), "--config", s(&cfg)])), 3);
}

#[test]
fn output_flag_writes_file() {
    let dir = TempDir::new().unwrap();
    let t = gen(&dir, SMALL, 10);
    let dest = dir.path().join("out.csv");
    let out = ear(&["sweep", s(&t), "--density-grid", "0.5", "--out", s(&dest)]);
    assert_eq!(code(&out), 0);
    assert!(out.stdout.is_empty());
    assert!(fs::read_to_string(&dest).unwrap().starts_with("policy,density"));
    let unwritable = dir.path().join("no/such/dir/out.csv");
    assert_eq!(code(&ear(&["sweep", s(&t), "--density-grid", "0.5", "--out", s(&unwritable)])), 3);
}
