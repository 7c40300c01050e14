use std::path::Path;
use std::process::{Command, Output};

use phnn::data::DataConfig;
use phnn::experiments::{ExperimentConfig, ModelSpec};
use phnn::integrators::Scheme;
use phnn::models::ModelKind;

fn phnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phnn")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn small_data() -> DataConfig {
    DataConfig {
        n_traj: 40,
        n_train: 4,
        n_eval: 8,
        n_infer: 2,
        ..DataConfig::default()
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    std::fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
}

#[test]
fn train_then_eval_reproduces_inference_error() {
    let dir = tempfile::tempdir().unwrap();
    let data_cfg = dir.path().join("data.json");
    write_json(&data_cfg, &small_data());
    let data_dir = dir.path().join("data");
    let out = stdout(&phnn(&[
        "gen-data", "--system", "duffing", "--seed", "7", "--n-train", "4",
        "--out", data_dir.to_str().unwrap(), "--config", data_cfg.to_str().unwrap(),
    ]));
    assert!(out.contains("2 inference trajectories"), "{out}");

    let mut cfg = ExperimentConfig {
        system: phnn::physics::OscillatorKind::Duffing,
        models: vec![ModelSpec::new(ModelKind::PhnnS, Scheme::Dg)],
        seeds: vec![0],
        n_train: vec![4],
        data: small_data(),
        data_seed: 7,
        dataset: Some(data_dir.join("dataset.csv")),
        ..ExperimentConfig::default()
    };
    cfg.train.steps = 5;
    cfg.train.batch_size = 2;
    let cfg_path = dir.path().join("exp.json");
    write_json(&cfg_path, &cfg);
    let runs = dir.path().join("runs");
    stdout(&phnn(&["train", "--config", cfg_path.to_str().unwrap(), "--out", runs.to_str().unwrap()]));

    let results = std::fs::read_to_string(runs.join("results.csv")).unwrap();
    let row = results.lines().nth(1).unwrap();
    let l_traj: f64 = row.split(',').nth(7).unwrap().parse().unwrap();

    let ckpt = std::fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "bin"))
        .unwrap();
    let out = stdout(&phnn(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data_dir.to_str().unwrap()]));
    let evaluated: f64 = out.lines().next().unwrap().trim_start_matches("L_traj ").parse().unwrap();
    assert!((evaluated - l_traj).abs() <= 1e-12 * l_traj.abs(), "{evaluated} vs {l_traj}");
}

#[test]
fn bad_arguments_fail_cleanly() {
    let o = phnn(&["gen-data", "--system", "pendulum", "--out", "/nonexistent"]);
    assert!(!o.status.success());
    let o = phnn(&["study", "--preset", "IV"]);
    assert!(!o.status.success());
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}
