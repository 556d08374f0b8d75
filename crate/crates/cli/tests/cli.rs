//! The `commformer` binary: config layering, exit codes, resume after a
//! kill, evaluation and plot export.

use std::fs;
use std::path::Path;
use std::process::{Command, Output, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_commformer"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn commformer")
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn config_value(dir: &Path, key: &str) -> String {
    let text = fs::read_to_string(dir.join("config.txt")).unwrap();
    text.lines()
        .find_map(|l| {
            l.split_once('=')
                .filter(|(k, _)| k.trim() == key)
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| panic!("{key} missing from config.txt"))
}

const SMALL: &[&str] = &[
    "--env",
    "diag",
    "--k",
    "1",
    "--set",
    "model.hidden=8",
    "--set",
    "train.workers=2",
    "--set",
    "train.rollout_len=4",
    "--set",
    "train.ppo_epochs=1",
    "--set",
    "eval_episodes=4",
];

fn train_small(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn flags_override_the_config_file() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("run.cfg");
    fs::write(
        &file,
        "# small run\nsteps = 80\nseed = 5\ntrain.lr = 0.002\n",
    )
    .unwrap();
    let out = tmp.path().join("run");
    let o = train_small(&out, &["--config", file.to_str().unwrap(), "--steps", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(config_value(&out, "steps"), "16");
    assert_eq!(config_value(&out, "seed"), "5");
    assert_eq!(config_value(&out, "train.lr"), "0.002");
    assert_eq!(manifest(&out)["env_steps"], 16);
}

#[test]
fn unknown_config_key_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let o = train_small(&tmp.path().join("run"), &["--set", "train.no_such_key=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("train.no_such_key"));
}

#[test]
fn bad_config_value_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let o = train_small(&tmp.path().join("run"), &["--set", "train.graph=ring"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_with_three() {
    let tmp = TempDir::new().unwrap();
    let o = run(&[
        "eval",
        "--checkpoint",
        tmp.path().join("nowhere").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&[
        "train",
        "--resume",
        tmp.path().join("nowhere").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn budget_from_sparsity_for_ten_agents() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let o = run(&[
        "train",
        "--out",
        out.to_str().unwrap(),
        "--env",
        "pp",
        "--agents",
        "10",
        "--sparsity",
        "0.4",
        "--steps",
        "8",
        "--set",
        "model.hidden=8",
        "--set",
        "train.workers=2",
        "--set",
        "train.rollout_len=4",
        "--set",
        "train.ppo_epochs=1",
        "--set",
        "eval_episodes=2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let m = manifest(&out);
    assert_eq!(m["k"], 4);
    assert_eq!(m["n_agents"], 10);
    for row in m["final_graph"].as_array().unwrap() {
        let ones = row
            .as_array()
            .unwrap()
            .iter()
            .filter(|v| v.as_u64() == Some(1))
            .count();
        assert_eq!(ones, 5, "four senders plus the diagonal");
    }
}

#[test]
fn eval_reports_a_summary() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    assert!(train_small(&out, &["--steps", "16"]).status.success());
    let o = run(&[
        "eval",
        "--checkpoint",
        out.to_str().unwrap(),
        "--episodes",
        "10",
        "--sample",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["episodes"], 10);
    let rate = report["success_rate"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&rate));
    assert_eq!(report["gated"], false);
    // gates only exist after stage two
    let o = run(&["eval", "--checkpoint", out.to_str().unwrap(), "--dyn-gate"]);
    assert!(!o.status.success());
}

#[test]
fn both_stages_log_gate_fractions_and_gated_eval() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    let o = train_small(
        &out,
        &[
            "--steps",
            "16",
            "--stage",
            "both",
            "--dyn-gate",
            "--set",
            "stage2.steps=16",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoints/stage1/manifest.json").exists());
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let stages: Vec<u64> = metrics
        .lines()
        .map(|l| {
            serde_json::from_str::<Value>(l).unwrap()["stage"]
                .as_u64()
                .unwrap()
        })
        .collect();
    assert_eq!(stages, [1, 1, 2, 2]);
    let m = manifest(&out);
    assert_eq!(m["stage"], 2);
    let open = m["eval"]["gate_open_fraction"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&open));
    let o = run(&[
        "eval",
        "--checkpoint",
        out.to_str().unwrap(),
        "--dyn-gate",
        "--episodes",
        "3",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn plot_data_writes_tables_and_frames() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("run");
    assert!(train_small(&out, &["--steps", "24"]).status.success());
    let plots = tmp.path().join("plots");
    let o = run(&[
        "plot-data",
        out.to_str().unwrap(),
        "--out",
        plots.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(plots.join("encoder_loss.csv")).unwrap();
    assert_eq!(
        csv.lines().count(),
        4,
        "header plus one row per iteration:\n{csv}"
    );
    let frames = fs::read_dir(plots.join("adjacency")).unwrap().count();
    assert_eq!(frames, 3);
    let svg = fs::read_to_string(plots.join("adjacency/it_000000.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

fn lines(path: &Path) -> usize {
    fs::read_to_string(path).map_or(0, |s| s.lines().count())
}

#[test]
fn killed_run_resumes_to_the_uninterrupted_result() {
    let tmp = TempDir::new().unwrap();
    let budget = [
        "--steps",
        "6000",
        "--set",
        "train.workers=1",
        "--set",
        "checkpoint_every=5",
    ];
    let straight = tmp.path().join("straight");
    assert!(train_small(&straight, &budget).status.success());

    let killed = tmp.path().join("killed");
    let mut args = vec!["train", "--out", killed.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(&budget);
    let mut child = bin()
        .args(&args)
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let start = Instant::now();
    while !(killed.join("checkpoints/latest/manifest.json").exists()
        && lines(&killed.join("metrics.jsonl")) >= 12)
    {
        assert!(
            start.elapsed() < Duration::from_secs(120),
            "no checkpoint appeared"
        );
        sleep(Duration::from_millis(2));
    }
    assert!(
        child.try_wait().unwrap().is_none(),
        "run finished before it could be interrupted"
    );
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(!killed.join("manifest.json").exists());

    let o = run(&["train", "--resume", killed.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for file in ["metrics.jsonl", "alpha_snapshots.jsonl"] {
        assert_eq!(
            fs::read(straight.join(file)).unwrap(),
            fs::read(killed.join(file)).unwrap(),
            "{file}"
        );
    }
    let (a, b) = (manifest(&straight), manifest(&killed));
    for key in [
        "config_hash",
        "iterations",
        "env_steps",
        "final_graph",
        "last_record",
        "eval",
    ] {
        assert_eq!(a[key], b[key], "{key}");
    }
}
