use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ditq::tensor::read_tensor;
use serde_json::Value;

const SMALL: &str = r#"{"k": 16, "m": 8, "tokens": 8, "T": 4, "calibration_traces": 4, "eval_traces": 4}"#;

fn ditq(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ditq"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Path, args: &[&str]) {
    let o = ditq(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn manifest(out: &Path, command: &str) -> Value {
    serde_json::from_slice(&fs::read(out.join("manifests").join(format!("{command}.json"))).unwrap()).unwrap()
}

fn smoothing(out: &Path) -> ditq::tensor::Matrix {
    read_tensor(out.join("calib/block0.qkv.smoothing.ditq")).unwrap().into_f32().unwrap()
}

#[test]
fn gen_is_deterministic_and_seed_sensitive() {
    let a = workspace();
    let b = workspace();
    ok(a.path(), &["gen", "--config", "small.json"]);
    ok(b.path(), &["gen", "--config", "small.json"]);
    let ha = manifest(a.path(), "gen")["outputs"].clone();
    assert_eq!(ha, manifest(b.path(), "gen")["outputs"]);
    assert_eq!(ha.as_object().unwrap().len(), 2 + 4 + 8 * 2);

    ok(b.path(), &["gen", "--config", "small.json", "--seed", "9"]);
    let hb = manifest(b.path(), "gen")["outputs"].clone();
    assert_ne!(ha["model/block0.qkv.ditq"], hb["model/block0.qkv.ditq"]);
    assert_eq!(manifest(b.path(), "gen")["seed"], 9);
}

#[test]
fn invalid_config_exits_with_usage_code() {
    let dir = workspace();
    fs::write(dir.path().join("bad.json"), r#"{"k": 0}"#).unwrap();
    let o = ditq(dir.path(), &["gen", "--config", "bad.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("k must be positive"));

    fs::write(dir.path().join("garbled.json"), "{not json").unwrap();
    assert_eq!(ditq(dir.path(), &["gen", "--config", "garbled.json"]).status.code(), Some(2));
    assert_eq!(ditq(dir.path(), &["quantize", "--wbits", "3"]).status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_with_io_code() {
    let dir = workspace();
    assert_eq!(ditq(dir.path(), &["calibrate"]).status.code(), Some(3));
    assert_eq!(ditq(dir.path(), &["eval"]).status.code(), Some(3));
    ok(dir.path(), &["gen", "--config", "small.json"]);
    assert_eq!(ditq(dir.path(), &["quantize"]).status.code(), Some(3));
}

#[test]
fn calibrate_is_repeatable_and_follows_alpha_limits() {
    let dir = workspace();
    let out = dir.path();
    ok(out, &["gen", "--config", "small.json"]);
    ok(out, &["calibrate"]);
    let first = manifest(out, "calibrate")["outputs"].clone();
    ok(out, &["calibrate"]);
    assert_eq!(first, manifest(out, "calibrate")["outputs"]);
    assert_eq!(smoothing(out).rows(), 4);

    let w = read_tensor(out.join("model/block0.qkv.ditq")).unwrap().into_f32().unwrap();
    let w_absmax: Vec<f32> = (0..w.rows()).map(|j| w.row(j).iter().fold(0.0f32, |a, v| a.max(v.abs()))).collect();
    let x_absmax = read_tensor(out.join("calib/block0.absmax.ditq")).unwrap().into_f32().unwrap();

    ok(out, &["calibrate", "--alpha", "0"]);
    let s0 = smoothing(out);
    ok(out, &["calibrate", "--alpha", "1"]);
    let s1 = smoothing(out);
    assert_ne!(s0, s1);
    for t in 0..4 {
        for j in 0..16 {
            let want0 = 1.0 / w_absmax[j].max(1e-5);
            let want1 = x_absmax.get(t, j).max(1e-5);
            assert!((s0.get(t, j) - want0).abs() <= 1e-6 * want0, "alpha 0, t={t} j={j}");
            assert!((s1.get(t, j) - want1).abs() <= 1e-6 * want1, "alpha 1, t={t} j={j}");
        }
    }

    ok(out, &["calibrate", "--mode", "static"]);
    assert_eq!(smoothing(out).rows(), 1);
}

#[test]
fn quantize_writes_expected_payloads() {
    let dir = workspace();
    let out = dir.path();
    ok(out, &["gen", "--config", "small.json"]);
    ok(out, &["calibrate"]);

    ok(out, &["quantize", "--wbits", "8", "--no-lora"]);
    let plain = out.join("bundles/sqd-w8a8/block0.qkv");
    assert!(plain.join("core.ditq").exists());
    assert!(!plain.join("adapter_a.ditq").exists());
    assert!(!plain.join("adapter_b.ditq").exists());

    ok(out, &["quantize", "--wbits", "4", "--rank", "16"]);
    let bundle = out.join("bundles/sqd-w4a8-r16/block0.qkv");
    let a = read_tensor(bundle.join("adapter_a.ditq")).unwrap().into_f16().unwrap();
    let b = read_tensor(bundle.join("adapter_b.ditq")).unwrap().into_f16().unwrap();
    assert_eq!((a.rows(), a.cols()), (16, 16));
    assert_eq!((b.rows(), b.cols()), (24, 16));
    let header = 4 + 4 + 1 + 1 + 2 * 8;
    let size = |name: &str| fs::metadata(bundle.join(name)).unwrap().len() as usize;
    assert_eq!(size("adapter_a.ditq") + size("adapter_b.ditq") - 2 * header, (16 + 24) * 16 * 2);
    let core = read_tensor(bundle.join("core.ditq")).unwrap().into_quantized().unwrap();
    assert_eq!(core.payload().len(), (16 * 24usize).div_ceil(2));
}

#[test]
fn eval_reports_every_cell_deterministically() {
    let dir = workspace();
    let out = dir.path();
    ok(out, &["gen", "--config", "small.json"]);
    ok(out, &["calibrate"]);
    ok(out, &["quantize", "--rank", "4"]);

    ok(out, &["eval", "--grid", "fp32"]);
    let report: Value = serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"][0]["end_to_end"]["rel_frobenius"], 0.0);

    let strip = |mut v: Value| {
        for c in v["cells"].as_array_mut().unwrap() {
            c["wall_clock_s"] = Value::Null;
        }
        v
    };
    ok(out, &["eval"]);
    let first = strip(serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap());
    assert_eq!(first["cells"].as_array().unwrap().len(), 7);
    ok(out, &["eval"]);
    let second = strip(serde_json::from_slice(&fs::read(out.join("report.json")).unwrap()).unwrap());
    assert_eq!(first, second);

    ok(out, &["eval", "--grid", "fp32,sqd-w8a8-r4", "--format", "csv"]);
    let csv = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 5);
    assert!(manifest(out, "eval")["inputs"]
        .as_object()
        .unwrap()
        .contains_key("bundles/sqd-w8a8-r4/block0.qkv/adapter_a.ditq"));

    assert_eq!(ditq(out, &["eval", "--grid", "bogus"]).status.code(), Some(2));
}

#[test]
fn run_writes_a_report_in_memory() {
    let dir = workspace();
    ok(dir.path(), &["run", "--config", "small.json", "--grid", "fp32,sqs-w8a8"]);
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 2);
}
