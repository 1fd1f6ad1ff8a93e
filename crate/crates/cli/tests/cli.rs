use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TOY: &str = r#"
seed = 3

[model]
arch = "toy-resnet"

[data]
source = "synthetic-gaussian-classes"
train_size = 64
test_size = 16
classes = 3
spread = 0.3

[train]
epochs = 1
batch_size = 16
schedule = { initial = 0.05 }
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lookupnet"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    assert_eq!(stderr.trim_end().lines().filter(|l| l.starts_with('{')).count(), 1);
    serde_json::from_str(line).unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn train_toy(dir: &Path, text: &str) -> Value {
    let cfg = write_config(dir, "run.toml.in", text);
    ok_json(&run(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()]))
}

#[test]
fn train_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let s = train_toy(dir.path(), TOY);
    assert_eq!(s["epochs"], 1);
    assert!(dir.path().join("model.lkp").exists());
    let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
}

#[test]
fn same_seed_gives_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train_toy(a.path(), TOY);
    train_toy(b.path(), TOY);
    let read = |d: &Path| std::fs::read(d.join("metrics.csv")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(std::fs::read(a.path().join("model.lkp")).unwrap(), std::fs::read(b.path().join("model.lkp")).unwrap());
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "bad.toml", &TOY.replace("[train]", "[train]\nlearning_rate = 0.1"));
    let e = err_json(&run(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]));
    assert_eq!(e["error"], "config");
    assert!(e["message"].as_str().unwrap().contains("learning_rate"));
}

#[test]
fn reparam_reports_equivalence_and_refuses_twice() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    train_toy(dir.path(), TOY);
    let model = dir.path().join("model.lkp");
    let r = ok_json(&run(&["reparam", "--model", model.to_str().unwrap(), "--out", d]));
    assert_eq!(r["muls"], 0);
    assert!(r["max_abs_diff"].as_f64().unwrap() <= 1e-4);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("conversion.json")).unwrap()).unwrap();
    assert_eq!(report["reload_exact"], true);
    assert_eq!(report["layers"].as_array().unwrap().len(), 4);

    let conv = dir.path().join("converted.lkp");
    let e = err_json(&run(&["reparam", "--model", conv.to_str().unwrap(), "--out", d]));
    assert_eq!(e["error"], "conversion");
}

#[test]
fn published_cost_cells() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let reference = |arch: &str, p: &str| {
        let out = run(&["cost", "--arch", arch, "--processor", p, "--out", d]);
        assert!(out.status.success());
        let text = String::from_utf8(out.stdout).unwrap();
        let line = text.lines().find(|l| l.starts_with("reference")).unwrap().to_string();
        line.split_whitespace().map(String::from).collect::<Vec<_>>()
    };
    let a7 = reference("resnet20-lookup", "a7");
    assert_eq!(&a7[a7.len() - 2..], ["13.6", "195M"]);
    let a15 = reference("resnet20-baseline", "a15");
    assert_eq!(&a15[a15.len() - 2..], ["124.2", "390M"]);
    let csv = std::fs::read_to_string(dir.path().join("cost_layers.csv")).unwrap();
    assert_eq!(csv.lines().count(), 21);
}

#[test]
fn inspect_table_of_an_untrained_layer() {
    let dir = tempfile::tempdir().unwrap();
    train_toy(dir.path(), &TOY.replace("epochs = 1", "epochs = 0"));
    let model = dir.path().join("model.lkp");
    let s = ok_json(&run(&["inspect-table", "--model", model.to_str().unwrap(), "--layer", "1", "--out", dir.path().to_str().unwrap()]));
    // 4 -> 4 channels, 3x3 kernels
    assert_eq!(s["weights"], 144);
    let csv = std::fs::read_to_string(s["csv"].as_str().unwrap()).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let t_f: Vec<f64> = rows.iter().filter(|r| r[0] == "t_f").map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(t_f.len(), 33);
    for (i, v) in t_f.iter().enumerate() {
        assert!((v - i as f64 / 32.0).abs() < 1e-6);
    }
    let hist: u64 = rows.iter().filter(|r| r[0] == "histogram").map(|r| r[3].parse::<u64>().unwrap()).sum();
    assert_eq!(hist, 144);

    let e = err_json(&run(&["inspect-table", "--model", model.to_str().unwrap(), "--layer", "9", "--out", dir.path().to_str().unwrap()]));
    assert_eq!(e["error"], "command");
}

#[test]
fn direct_scale_toggles_expose_scale_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let text = TOY.replace("[data]", "[strategy]\nexponential_scales = false\ngrad_rescale = false\n\n[data]");
    train_toy(dir.path(), &text);
    let steps = std::fs::read_to_string(dir.path().join("steps.csv")).unwrap();
    let header = steps.lines().next().unwrap();
    assert_eq!(header.matches("s_w:").count(), 4);
    assert_eq!(steps.lines().count(), 1 + 4);
}

#[test]
fn usage_errors_are_single_line() {
    let e = err_json(&run(&["cost", "--processor", "a9", "--arch", "resnet20-lookup"]));
    assert_eq!(e["error"], "usage");
}
