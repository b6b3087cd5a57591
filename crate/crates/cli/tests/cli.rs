//! End-to-end tests of the `spdiff` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use spdiff::denoiser::DenoiserParams;
use spdiff::io::read_batch_file;
use spdiff::pipeline::{RunConfig, TrainedModel};
use spdiff::rng::seeded;
use tempfile::TempDir;

const TINY_CONFIG: &str = "hidden = 8\nenc_dim = 4\ndiffusion_steps = 10\nepochs = 2\nbatch_size = 8\n";

fn spdiff(args: &[&str]) -> Output {
    spdiff_env(args, &[])
}

fn spdiff_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spdiff"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = spdiff(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

fn gen(dir: &Path, name: &str, dataset: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    ok(&["gen-data", "--dataset", dataset, "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(&path)]);
    path
}

fn train_tiny(dir: &Path, data: &Path, name: &str, extra: &[&str]) -> (PathBuf, String) {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY_CONFIG).unwrap();
    let out = dir.join(name);
    let mut args = vec!["train", "--config", p(&cfg), "--data", p(data), "--out", p(&out)];
    args.extend_from_slice(extra);
    let log = ok(&args);
    (out, log)
}

#[test]
fn gen_data_single_series_and_determinism() {
    let dir = TempDir::new().unwrap();
    let a = gen(dir.path(), "a.jsonl", "sink", 1, 7);
    let b = gen(dir.path(), "b.jsonl", "sink", 1, 7);
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let header: Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(header["seed"], 7);
    assert_eq!(header["meta"]["dataset"], "sink");
    assert!(header["tool_version"].is_string());
    let (_, batch) = read_batch_file(&a).unwrap();
    assert_eq!(batch.len(), 1);
    assert_eq!(batch.dim(), 2);
}

#[test]
fn gen_data_overrides_and_errors() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("s.jsonl");
    ok(&["gen-data", "--dataset", "sine", "--n", "3", "--out", p(&path), "--set", "points=12"]);
    let (_, batch) = read_batch_file(&path).unwrap();
    assert!(batch.iter().all(|s| s.len() == 12));
    let bad = spdiff(&["gen-data", "--dataset", "weather", "--n", "3", "--out", p(&path)]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("unknown dataset"));
    let bad = spdiff(&["gen-data", "--dataset", "sine", "--n", "3", "--out", p(&path), "--set", "speed=2"]);
    assert!(!bad.status.success());
}

#[test]
fn zero_epochs_checkpoint_equals_initialization() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.jsonl", "sine", 8, 1);
    let (ckpt, log) = train_tiny(dir.path(), &data, "m.json", &["--epochs", "0", "--seed", "5"]);
    let lines = json_lines(&log);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0]["config"]["seed"], 5);
    let model = TrainedModel::load(&ckpt).unwrap();
    let cfg = RunConfig { epochs: 0, seed: 5, ..model.config.clone() };
    assert_eq!(model.config, cfg);
    let init = DenoiserParams::init(cfg.architecture(1), &mut seeded(5)).unwrap();
    assert_eq!(model.params, init);
}

#[test]
fn deterministic_training_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.jsonl", "sine", 24, 2);
    let (a, log) = train_tiny(dir.path(), &data, "a.json", &["--deterministic"]);
    let (b, _) = train_tiny(dir.path(), &data, "b.json", &["--deterministic"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let lines = json_lines(&log);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["config"]["deterministic"], true);
    assert_eq!(lines[2]["epoch"], 2);
    assert!(lines[1]["loss"].as_f64().unwrap().is_finite());
}

#[test]
fn config_errors_name_the_field() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.jsonl", "sine", 4, 2);
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "hiden = 8\n").unwrap();
    let out = dir.path().join("m.json");
    let r = spdiff(&["train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)]);
    assert_eq!(r.status.code(), Some(2));
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("configuration error") && err.contains("hiden"), "{err}");
    let json_cfg = dir.path().join("cfg.json");
    fs::write(&json_cfg, r#"{"batch_size": 0}"#).unwrap();
    let r = spdiff(&["train", "--config", p(&json_cfg), "--data", p(&data), "--out", p(&out)]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("batch_size"));
    let r = spdiff(&["train", "--data", p(&data), "--out", p(&out), "--kernel", "matern"]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("`kernel`"));
}

#[test]
fn training_reduces_loss_on_default_sine_run() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.jsonl", "sine", 200, 3);
    let out = dir.path().join("m.json");
    let log = ok(&["train", "--data", p(&data), "--out", p(&out), "--epochs", "20"]);
    let lines = json_lines(&log);
    let first = lines[1]["loss"].as_f64().unwrap();
    let twentieth = lines[20]["loss"].as_f64().unwrap();
    assert_eq!(lines[20]["epoch"], 20);
    assert!(twentieth < first, "epoch 1 {first}, epoch 20 {twentieth}");
}

#[test]
fn sampling_contracts() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.jsonl", "sine", 16, 4);
    let (ckpt, _) = train_tiny(dir.path(), &data, "m.json", &[]);
    let empty = dir.path().join("empty.jsonl");
    ok(&["sample", "--checkpoint", p(&ckpt), "--times", "uniform:8:0:10", "--n", "0", "--out", p(&empty)]);
    assert_eq!(fs::read_to_string(&empty).unwrap().lines().count(), 1);

    let times: Vec<f64> = (0..17).map(|i| 0.3 * i as f64 + 0.01 * (i * i % 7) as f64).collect();
    let grids = dir.path().join("grids.json");
    fs::write(&grids, serde_json::to_string(&vec![times.clone()]).unwrap()).unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    ok(&["sample", "--checkpoint", p(&ckpt), "--times", p(&grids), "--n", "3", "--seed", "9", "--out", p(&a)]);
    ok(&["sample", "--checkpoint", p(&ckpt), "--times", p(&grids), "--n", "3", "--seed", "9", "--out", p(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let (header, batch) = read_batch_file(&a).unwrap();
    assert_eq!(header.seed, Some(9));
    assert_eq!(header.meta["sampler"], "ancestral");
    assert_eq!(header.meta["config"]["hidden"], 8);
    assert!(batch.iter().all(|s| s.grid.times() == times.as_slice()));

    for spec in ["uniform:8:0", "uniform:x:0:1", "grid:8", "/no/such/file.json"] {
        let r = spdiff(&["sample", "--checkpoint", p(&ckpt), "--times", spec, "--n", "1", "--out", p(&a)]);
        assert!(String::from_utf8_lossy(&r.stderr).contains("bad times spec"), "{spec}");
    }
    let r = spdiff(&["sample", "--checkpoint", p(&ckpt), "--times", "uniform:8:0:1", "--n", "1", "--out", p(&a), "--sampler", "prob-flow"]);
    assert!(!r.status.success());
}

#[test]
fn sample_order_does_not_depend_on_thread_count() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.jsonl", "sine", 16, 5);
    let (ckpt, _) = train_tiny(dir.path(), &data, "m.json", &["--model", "cspd"]);
    let mut files = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("s{threads}.jsonl"));
        let args = ["sample", "--checkpoint", p(&ckpt), "--times", "uniform:10:0:10", "--n", "6", "--seed", "2", "--out", p(&out), "--steps", "50", "--deterministic"];
        let r = spdiff_env(&args, &[("SPDIFF_THREADS", threads)]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        files.push(fs::read(&out).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let r = spdiff_env(&["verify"], &[("SPDIFF_THREADS", "zero")]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("SPDIFF_THREADS"));
}

#[test]
fn eval_reports() {
    let dir = TempDir::new().unwrap();
    let real = gen(dir.path(), "r.jsonl", "ou_data", 100, 6);
    let disc = json_lines(&ok(&["eval", "--metric", "disc", "--real", p(&real), "--fake", p(&real), "--seed", "11"]));
    let acc = disc[0]["value"].as_f64().unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
    assert_eq!(disc[0]["config"]["seed"], 11);
    assert_eq!(disc[0]["config"]["real"], p(&real));
    assert_eq!(disc[0]["config"]["fake"], p(&real));

    let marginal = json_lines(&ok(&["eval", "--metric", "marginal", "--real", p(&real), "--fake", p(&real)]));
    assert_eq!(marginal[0]["value"], 0.0);

    let nll = json_lines(&ok(&["eval", "--metric", "nll", "--real", p(&real), "--fake", p(&real), "--kernel", "ou", "--gamma", "0.1"]));
    assert_eq!(nll[0]["value"], nll[0]["details"]["real_value"]);

    let r = spdiff(&["eval", "--metric", "crps", "--real", p(&real), "--fake", p(&real)]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("unknown metric"));
}

#[test]
fn energy_needs_several_samples_per_grid() {
    let dir = TempDir::new().unwrap();
    let data = gen(dir.path(), "d.jsonl", "sine", 16, 7);
    let (ckpt, _) = train_tiny(dir.path(), &data, "m.json", &[]);
    let obs = dir.path().join("obs.jsonl");
    ok(&["sample", "--checkpoint", p(&ckpt), "--times", "uniform:8:0:10", "--n", "1", "--seed", "1", "--out", p(&obs)]);
    let one = dir.path().join("one.jsonl");
    ok(&["sample", "--checkpoint", p(&ckpt), "--times", "uniform:8:0:10", "--n", "1", "--seed", "2", "--out", p(&one)]);
    let r = spdiff(&["eval", "--metric", "energy", "--real", p(&obs), "--fake", p(&one)]);
    assert!(String::from_utf8_lossy(&r.stderr).contains("empty sample set"));
    let many = dir.path().join("many.jsonl");
    ok(&["sample", "--checkpoint", p(&ckpt), "--times", "uniform:8:0:10", "--n", "5", "--seed", "2", "--out", p(&many)]);
    let report = json_lines(&ok(&["eval", "--metric", "energy", "--real", p(&obs), "--fake", p(&many)]));
    assert_eq!(report[0]["metric"], "energy");
    assert!(report[0]["value"].as_f64().unwrap() > 0.0);
}

#[test]
fn verify_passes_and_prints_json_lines() {
    let out = spdiff(&["verify"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let lines = json_lines(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(lines.len(), 7);
    for l in &lines[..6] {
        assert_eq!(l["passed"], true, "{l}");
    }
    assert_eq!(lines[6]["summary"]["failed"], 0);
}
