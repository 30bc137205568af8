//! End-to-end runs of the `vitkit` binary.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn vitkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitkit")).args(args).output().expect("binary runs")
}

fn json(args: &[&str]) -> Value {
    let out = vitkit(args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn analyze_vit_b() {
    let r = json(&["analyze", "--model", "b", "--layout", "12x1", "--stem", "linear", "--res", "224"]);
    assert_eq!(r["schema_version"], "1");
    let flops = r["flops_total"].as_u64().unwrap() as f64;
    assert!((flops / 17.58e9 - 1.0).abs() < 0.01, "{flops}");
}

#[test]
fn parallel_and_sequential_layouts_cost_the_same() {
    let dir = tempfile::tempdir().unwrap();
    let par = dir.path().join("par.json");
    let out = vitkit(&["analyze", "--model", "b", "--layout", "12x2", "--out", par.to_str().unwrap()]);
    assert!(out.status.success());
    let par = read_json(&par);
    let seq = json(&["analyze", "--model", "b", "--layout", "24x1"]);
    assert_eq!(par["params_total"], seq["params_total"]);
    assert_eq!(par["flops_total"], seq["flops_total"]);
}

#[test]
fn masktest_reports_independence() {
    let r = json(&["masktest", "--stem", "hmlp", "--stem-norm", "ln"]);
    assert_eq!(r["independent"], true);
    assert_eq!(r["deviation"].as_f64(), Some(0.0));

    let conv = json(&["masktest", "--stem", "conv", "--res", "64", "--trials", "3"]);
    assert_eq!(conv["independent"], false);
    assert!(conv["deviation"].as_f64().unwrap() > 0.0);
}

#[test]
fn exit_codes() {
    assert_eq!(vitkit(&["analyze", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(vitkit(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vitkit(&["analyze", "--layout", "12"]).status.code(), Some(1));
    assert_eq!(vitkit(&["analyze", "--model", "custom", "--width", "64"]).status.code(), Some(1));
    assert_eq!(vitkit(&["bench", "--layouts", "4x1", "--exec", "par"]).status.code(), Some(1));
    assert_eq!(vitkit(&["--help"]).status.code(), Some(0));
    let missing = vitkit(&["finetune", "--checkpoint", "/nonexistent/model.vtc", "--out", "/tmp/unused"]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn train_then_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let model = ["--model", "custom", "--width", "32", "--depth", "2", "--heads", "2"];
    let mut args = vec!["train", "--epochs", "1", "--train-size", "64", "--test-size", "32", "--seed", "3"];
    args.extend(model);
    args.extend(["--out", run.to_str().unwrap()]);
    assert!(vitkit(&args).status.success());
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert_eq!(read_json(&run.join("report.json"))["schema_version"], "1");

    // Same seed, same bytes.
    let again = dir.path().join("again");
    let last = args.len() - 1;
    args[last] = again.to_str().unwrap();
    assert!(vitkit(&args).status.success());
    assert_eq!(std::fs::read_to_string(again.join("metrics.csv")).unwrap(), csv);
    assert_eq!(std::fs::read(again.join("model.vtc")).unwrap(), std::fs::read(run.join("model.vtc")).unwrap());

    let ft = dir.path().join("ft");
    let ckpt = run.join("model.vtc");
    let out = vitkit(&[
        "finetune", "--checkpoint", ckpt.to_str().unwrap(), "--tune", "attn", "--res", "64", "--epochs", "1",
        "--train-size", "32", "--test-size", "16", "--out", ft.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = read_json(&ft.join("report.json"));
    assert_eq!(r["freeze_verified"], true);
    assert_eq!(r["resolution"], 64);
}

#[test]
fn pretrain_bench_and_gradcheck() {
    let dir = tempfile::tempdir().unwrap();
    let model = ["--model", "custom", "--width", "32", "--depth", "2", "--heads", "2"];

    let mim = dir.path().join("mim");
    let mut args = vec!["pretrain-mim", "--stem", "hmlp", "--epochs", "1", "--train-size", "32"];
    args.extend(model);
    args.extend(["--out", mim.to_str().unwrap()]);
    assert!(vitkit(&args).status.success());
    assert!(std::fs::read_to_string(mim.join("mim.csv")).unwrap().starts_with("epoch,lr,mim_loss\n"));

    let mut args = vec!["bench", "--layouts", "2x2,1x4", "--batches", "1,2", "--res", "32"];
    args.extend(model);
    let out = vitkit(&args);
    assert!(out.status.success());
    let csv = String::from_utf8(out.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("layout,exec,batch,ips,stddev,repeats"));
    assert_eq!(lines.count(), 2 * 2 * 2);

    let mut args = vec!["gradcheck", "--layout", "1x2", "--coords", "4"];
    args.extend(model);
    let r = json(&args);
    assert_eq!(r["pass"], true);
    assert!(r["max_rel_err"].as_f64().unwrap() < 1e-4);
}
