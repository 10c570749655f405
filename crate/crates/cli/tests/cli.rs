use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use driftsim::io::{RunManifest, MANIFEST_NAME};

const TINY_TRAIN: [&str; 8] = [
    "--set",
    "trainer.n_envs=64",
    "--set",
    "trainer.rollout_length=16",
    "--set",
    "trainer.minibatch_size=256",
    "--set",
    "trainer.total_env_steps=3072",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_driftsim"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin().arg("--quiet").arg("--out").arg(out).args(args).output().unwrap()
}

fn ok(out: &Path, args: &[&str]) {
    let o = run(out, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_NAME)).unwrap()).unwrap()
}

#[test]
fn gen_path_circle_has_expected_rows() {
    let d = scratch("gen_circle");
    ok(&d, &["gen-path", "circle", "--radius", "1"]);
    let text = fs::read_to_string(d.join("circle.csv")).unwrap();
    let rows = text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("s,"))
        .count();
    assert!((rows as i64 - 1257).abs() <= 2, "{rows} rows");
    manifest(&d).verify(&d).unwrap();
}

#[test]
fn gen_path_random_is_seeded() {
    let a = scratch("gen_random_a");
    let b = scratch("gen_random_b");
    ok(&a, &["--seed", "7", "gen-path", "random"]);
    ok(&b, &["--seed", "7", "gen-path", "random"]);
    assert_eq!(
        fs::read(a.join("random.csv")).unwrap(),
        fs::read(b.join("random.csv")).unwrap()
    );
}

#[test]
fn invalid_radius_is_a_usage_error() {
    let d = scratch("bad_radius");
    for r in ["0", "-1"] {
        let o = run(&d, &["gen-path", "circle", "--radius", r]);
        assert_eq!(o.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&o.stderr).contains("radius"));
    }
    let o = run(&d, &["gen-path", "triangle"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let d = scratch("bad_key");
    let o = run(&d, &["--set", "trainer.learning_rate=1", "train"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn corrupted_checkpoint_is_a_data_error() {
    let d = scratch("bad_ckpt");
    ok(&d.join("t"), &["--set", "trainer.total_env_steps=0", "train"]);
    let ckpt = d.join("t/policy.bin");
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&ckpt, bytes).unwrap();
    let o = run(&d.join("e"), &["eval", "--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn zero_step_training_writes_initial_checkpoint() {
    let d = scratch("train_zero");
    ok(&d, &["--set", "trainer.total_env_steps=0", "train"]);
    assert!(d.join("policy.bin").exists() && d.join("policy.bin.json").exists());
    let m = manifest(&d);
    assert_eq!(m.command, "train");
    assert!(m.files.iter().any(|f| f.path == "policy.bin"));
    m.verify(&d).unwrap();
    assert_eq!(
        fs::read_to_string(d.join("learning_curve.csv"))
            .unwrap()
            .lines()
            .count(),
        1
    );
}

#[test]
fn training_outputs_are_identical_across_runs_and_threads() {
    let dirs: Vec<PathBuf> = ["a", "b", "c"]
        .iter()
        .map(|n| scratch(&format!("train_repro_{n}")))
        .collect();
    for (d, threads) in dirs.iter().zip(["1", "1", "2"]) {
        let mut args = vec!["--threads", threads];
        args.extend(TINY_TRAIN);
        args.push("train");
        ok(d, &args);
    }
    for f in ["learning_curve.csv", "policy.bin", "policy.bin.json", "config.txt"] {
        let a = fs::read(dirs[0].join(f)).unwrap();
        for d in &dirs[1..] {
            assert!(a == fs::read(d.join(f)).unwrap(), "{f} differs in {}", d.display());
        }
    }
}

#[test]
fn config_file_round_trips() {
    let d = scratch("config_round_trip");
    ok(
        &d.join("a"),
        &[
            "--set",
            "trainer.total_env_steps=0",
            "--set",
            "randomization.tire_b=0.7, 1.1",
            "train",
        ],
    );
    let first = fs::read_to_string(d.join("a/config.txt")).unwrap();
    assert!(first.contains("randomization.tire_b.lo = 0.7"));
    let cfg = d.join("a/config.txt");
    ok(&d.join("b"), &["--config", cfg.to_str().unwrap(), "train"]);
    assert_eq!(first, fs::read_to_string(d.join("b/config.txt")).unwrap());
}

#[test]
fn evaluation_is_reproducible_and_complete() {
    let d = scratch("eval");
    let mut args: Vec<&str> = TINY_TRAIN.to_vec();
    args.push("train");
    ok(&d.join("t"), &args);
    let ckpt = d.join("t/policy.bin");
    let eval = |name: &str, threads: &str| {
        let out = d.join(name);
        ok(
            &out,
            &[
                "--threads",
                threads,
                "eval",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--trials",
                "3",
                "--max-steps",
                "300",
            ],
        );
        out
    };
    let a = eval("e1", "1");
    let b = eval("e2", "2");
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.join("eval_report.json")).unwrap()).unwrap();
    assert_eq!(report["n_trials"], 3);
    for key in ["rmse_pos", "mean_abs_beta", "mean_v"] {
        assert!(
            report[key]["mean"].is_number() && report[key]["std"].is_number(),
            "{key}"
        );
    }
    let mut files = vec!["eval_report.json".to_string(), "episodes.json".to_string()];
    for i in 0..3 {
        files.push(format!("traces/trial_{i:03}.csv"));
        files.push(format!("phase/trial_{i:03}.csv"));
    }
    for f in &files {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(a.join("path_overlay.svg").exists() && a.join("phase_plane.svg").exists());
    manifest(&a).verify(&a).unwrap();
}

#[test]
fn locked_output_directory_is_refused() {
    let d = scratch("locked");
    fs::write(d.join(".driftsim.lock"), b"").unwrap();
    let o = run(&d, &["gen-path", "circle"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn ablation_table_has_one_row_per_config() {
    let d = scratch("ablate");
    ok(
        &d,
        &[
            "--set",
            "ablation.configs=full,no_init_state",
            "--set",
            "ablation.total_env_steps=2048",
            "--set",
            "ablation.n_trials=2",
            "--set",
            "trainer.n_envs=64",
            "--set",
            "trainer.rollout_length=16",
            "--set",
            "trainer.minibatch_size=256",
            "--set",
            "env.path_pool_size=4",
            "--set",
            "eval.max_steps=200",
            "ablate",
        ],
    );
    let csv = fs::read_to_string(d.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "method,success,rmse_mean,rmse_std,beta_mean,beta_std");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("full,") && lines[2].starts_with("no_init_state,"));
}

#[test]
fn bench_with_zero_steps_reports_na() {
    let d = scratch("bench");
    ok(&d, &["bench", "--steps", "0", "--instances", "1,64"]);
    let csv = fs::read_to_string(d.join("bench.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.ends_with("n/a")));
    let j: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("bench.json")).unwrap()).unwrap();
    assert_eq!(j["batch_matches_sequential"], true);
}
