use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use odekkl::cli::{parse_config, TrainFileConfig};
use odekkl::net::Activation;
use odekkl::observer::{KklObserver, Observer};
use odekkl::systems::{rng_from_seed, NoiseKind};
use odekkl::train::{LossMode, OptimizerSpec};
use serde_json::{json, Value};
use tempfile::TempDir;

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn bundled_json(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(bundled(name)).unwrap()).unwrap()
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn odekkl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odekkl")).args(args).output().unwrap()
}

fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    odekkl(&args)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Asserts exit code 2 with one JSON line naming `key`.
fn assert_config_error(o: &Output, key: &str) {
    assert_eq!(o.status.code(), Some(2), "stderr: {}", stderr(o));
    let err = stderr(o);
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    let v: Value = serde_json::from_str(err.trim_end()).unwrap();
    assert_eq!(v["error"], "config");
    assert_eq!(v["key"], key, "{err}");
}

fn tiny_train_config() -> Value {
    json!({
        "schema_version": 1,
        "system": { "name": "vanderpol" },
        "grid": { "t0": 0.0, "tf": 2.0, "h": 0.05 },
        "n_trajectories": 4,
        "observer": { "type": "kkl", "hidden": [8], "activation": "tanh" },
        "train": { "epochs": 4, "batch_size": 2, "learning_rate": 0.01, "lr_decay": 0.99, "seed": 3 },
        "checkpoint_every": 1
    })
}

#[test]
fn unknown_keys_are_rejected_with_their_path() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny_train_config();
    cfg["train"]["learning_rat"] = json!(0.1);
    let o = run("train", &write_config(tmp.path(), "c.json", &cfg), tmp.path(), &[]);
    assert_config_error(&o, "train.learning_rat");
    assert!(stderr(&o).contains("learning_rat"));

    let mut cfg = tiny_train_config();
    cfg["bogus"] = json!(true);
    let o = run("train", &write_config(tmp.path(), "c.json", &cfg), tmp.path(), &[]);
    assert_config_error(&o, "bogus");
}

#[test]
fn schema_version_is_required() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny_train_config();
    cfg.as_object_mut().unwrap().remove("schema_version");
    assert_config_error(&run("train", &write_config(tmp.path(), "c.json", &cfg), tmp.path(), &[]), "schema_version");
    cfg["schema_version"] = json!(2);
    assert_config_error(&run("train", &write_config(tmp.path(), "c.json", &cfg), tmp.path(), &[]), "schema_version");
}

#[test]
fn invalid_values_exit_with_config_error() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = tiny_train_config();
    cfg["train"]["gamma"] = json!(-0.1);
    let o = run("train", &write_config(tmp.path(), "c.json", &cfg), tmp.path(), &[]);
    assert_config_error(&o, "train.gamma");

    let mut cfg = tiny_train_config();
    cfg["grid"] = json!({ "t0": 1.0, "tf": 1.0, "h": 0.1 });
    let o = run("train", &write_config(tmp.path(), "c.json", &cfg), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);

    let o = odekkl(&["train"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_3() {
    let tmp = TempDir::new().unwrap();
    let cfg = json!({
        "schema_version": 1,
        "system": { "name": "linear", "a": [[20.0, 0.0], [0.0, 20.0]], "c": [[1.0, 0.0]] },
        "grid": { "t0": 0.0, "tf": 100.0, "h": 0.01 },
        "initial_conditions": { "points": [[1.0, 1.0]] }
    });
    let o = run("simulate", &write_config(tmp.path(), "c.json", &cfg), tmp.path(), &[]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let v: Value = serde_json::from_str(stderr(&o).trim_end()).unwrap();
    assert_eq!(v["error"], "divergence");
}

#[test]
fn simulate_is_deterministic_and_conserves_the_duffing_invariant() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = run("simulate", &bundled("duffing_simulate.json"), out, &[]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    let text = std::fs::read_to_string(a.join("trajectory_0.csv")).unwrap();
    assert_eq!(text, std::fs::read_to_string(b.join("trajectory_0.csv")).unwrap());
    assert!(!text.contains('\r'));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,x1,x2,y1"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 2501);
    let energy = |r: &[f64]| 2.0 * r[1] * r[1] + r[2].powi(4);
    let e0 = energy(&rows[0]);
    assert!(rows.iter().all(|r| (energy(r) - e0).abs() < 1e-6));
    assert!(rows.iter().all(|r| r[3] == r[1]));
}

#[test]
fn resumed_training_continues_the_history() {
    let tmp = TempDir::new().unwrap();
    let full = tmp.path().join("full");
    let o = run("train", &write_config(tmp.path(), "full.json", &tiny_train_config()), &full, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let mut first = tiny_train_config();
    first["train"]["epochs"] = json!(2);
    let part = tmp.path().join("part");
    let o = run("train", &write_config(tmp.path(), "first.json", &first), &part, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut second = tiny_train_config();
    second["resume_from"] = json!("part/checkpoint.json");
    let o = run("train", &write_config(tmp.path(), "second.json", &second), &part, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let read = |p: &Path| std::fs::read_to_string(p).unwrap();
    assert_eq!(read(&full.join("history.csv")), read(&part.join("history.csv")));
    assert_eq!(read(&full.join("observer.json")), read(&part.join("observer.json")));
    assert_eq!(read(&full.join("history.csv")).lines().count(), 5);
}

#[test]
fn seed_flag_overrides_the_config_seed() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", &tiny_train_config());
    let history = |out: &str, extra: &[&str]| {
        let dir = tmp.path().join(out);
        let o = run("train", &cfg, &dir, extra);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        std::fs::read_to_string(dir.join("history.csv")).unwrap()
    };
    assert_eq!(history("a", &["--seed", "3"]), history("b", &[]));
    assert_ne!(history("c", &["--seed", "4"]), history("b", &[]));
}

fn untrained_kkl(eigenvalues: &[f64], seed: u64) -> Observer {
    let mut rng = rng_from_seed(seed);
    Observer::Kkl(KklObserver::init(2, 1, Some(eigenvalues), &[8], Activation::Tanh, false, &mut rng).unwrap())
}

#[test]
fn eval_writes_one_row_per_cell() {
    let tmp = TempDir::new().unwrap();
    untrained_kkl(&[-1.0, -2.0, -3.0], 1).save(&tmp.path().join("obs.json")).unwrap();
    let cfg = json!({
        "schema_version": 1,
        "system": { "name": "vanderpol" },
        "grid": { "t0": 0.0, "tf": 5.0, "h": 0.05 },
        "initial_conditions": { "points": [[-0.5, 0.5]], "random": 2 },
        "observers": [{ "id": "only", "path": "obs.json" }],
        "scenarios": [{ "label": "clean", "noise": { "kind": "none" } }],
        "write_trajectories": true
    });
    let out = tmp.path().join("out");
    let o = run("eval", &write_config(tmp.path(), "eval.json", &cfg), &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("scenario_matrix.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines, ["observer,scenario,rmse,convergence_time", lines[1]]);
    assert!(lines[1].starts_with("only,clean,"));
    let traj = std::fs::read_to_string(out.join("trajectories/only__clean__2.csv")).unwrap();
    assert!(traj.starts_with("t,x1,x2,xhat1,xhat2,y1\n"));
}

#[test]
fn bundled_table_config_yields_fifteen_cells() {
    let tmp = TempDir::new().unwrap();
    let configs = tmp.path().join("configs");
    std::fs::create_dir(&configs).unwrap();
    let table = bundled_json("table1.json");
    for (i, r) in table["observers"].as_array().unwrap().iter().enumerate() {
        let p = configs.join(r["path"].as_str().unwrap());
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        untrained_kkl(&[-1.0, -2.0, -3.0], i as u64).save(&p).unwrap();
    }
    let mut cfg = table.clone();
    cfg["grid"]["tf"] = json!(5.0);
    let out = tmp.path().join("out");
    let o = run("eval", &write_config(&configs, "table1.json", &cfg), &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("scenario_matrix.csv")).unwrap();
    assert_eq!(text.lines().count(), 16);
    for s in ["no_noise", "gaussian_0_0.5", "uniform_-3_3"] {
        assert_eq!(text.lines().filter(|l| l.split(',').nth(1) == Some(s)).count(), 5);
    }
}

#[test]
fn sweep_writes_one_row_per_scale() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = bundled_json("sweep.json");
    cfg["k_values"] = json!([1.0]);
    let out = tmp.path().join("out");
    let o = run("sweep", &write_config(tmp.path(), "s.json", &cfg), &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], "k,convergence_time,steady_state_error");
    let steady: f64 = lines[1].split(',').nth(2).unwrap().parse().unwrap();
    assert!(steady > 0.0 && steady < 1e-2);
}

#[test]
fn genmap_covers_the_lattice() {
    let tmp = TempDir::new().unwrap();
    let mut rng = rng_from_seed(4);
    let obs = Observer::Kkl(KklObserver::init(2, 1, None, &[8], Activation::Tanh, true, &mut rng).unwrap());
    obs.save(&tmp.path().join("obs.json")).unwrap();
    let mut cfg = bundled_json("duffing_small_genmap.json");
    cfg["observer"] = json!("obs.json");
    cfg["grid"]["tf"] = json!(2.0);
    cfg["resolution"] = json!([3, 4]);
    let out = tmp.path().join("out");
    let o = run("genmap", &write_config(tmp.path(), "g.json", &cfg), &out, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(out.join("genmap.csv")).unwrap();
    assert_eq!(text.lines().count(), 13);
    assert_eq!(text.lines().next(), Some("x1_0,x2_0,rmse"));
}

#[test]
fn bundled_noise_config_follows_the_published_recipe() {
    let text = std::fs::read_to_string(bundled("vanderpol_noise.json")).unwrap();
    let cfg: TrainFileConfig = parse_config(&text).unwrap();
    assert_eq!((cfg.grid.t0, cfg.grid.tf, cfg.grid.h), (0.0, 50.0, 0.02));
    assert_eq!(cfg.n_trajectories, 50);
    let t = &cfg.train;
    assert_eq!((t.epochs, t.batch_size, t.learning_rate), (1000, 50, 1e-3));
    assert!(matches!(t.optimizer, OptimizerSpec::Adam { .. }));
    assert_eq!(t.lr_decay, 0.9999);
    assert_eq!(t.gamma, 0.0);
    assert!(t.learn_eigenvalues);
    assert_eq!(t.loss_mode, LossMode::Lagrange);
    assert!(matches!(t.train_noise.kind, NoiseKind::Gaussian { mean, std } if mean == 0.0 && std == 0.5));
    let v = bundled_json("vanderpol_noise.json");
    assert_eq!(v["observer"]["hidden"], json!([50, 50, 50, 50]));
}

#[test]
fn every_bundled_config_parses() {
    for entry in std::fs::read_dir(bundled("")).unwrap() {
        let path = entry.unwrap().path();
        let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["schema_version"], 1, "{}", path.display());
    }
}
