use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};
use tempfile::TempDir;

const TINY: &str = r#"{
  "data": {"height": 8, "width": 8, "sprite_size": 3, "patch_size": 2, "num_frames": 4, "num_sequences": 6},
  "model": {"enc_blocks": 1, "dec_blocks": 1, "depth": 2, "hidden": 16, "heads": 2, "freq_dim": 16},
  "train": {"batch_size": 2, "steps": 6, "k": 2, "log_every": 1, "save_every": 3},
  "rollout": {"num_frames": 3, "denoise_steps": 4},
  "bench": {"frames": 2, "steps": 2, "trials": 3, "warmup": 0}
}"#;

struct Env {
    dir: TempDir,
    config: PathBuf,
}

impl Env {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("run.json");
        fs::write(&config, TINY).unwrap();
        Env { dir, config }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn scd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_scd"))
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env_remove("SCD_SEED")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let out = self.scd(args);
        assert!(
            out.status.success(),
            "scd {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        out
    }
}

fn sha(path: &Path) -> Vec<u8> {
    Sha256::digest(fs::read(path).unwrap()).to_vec()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_reproducible_and_seeded() {
    let env = Env::new();
    let (a, b, c) = (env.path("a.scd"), env.path("b.scd"), env.path("c.scd"));
    env.ok(&["gen-data", "--out", s(&a)]);
    env.ok(&["gen-data", "--out", s(&b)]);
    env.ok(&["--set", "data.seed=5", "gen-data", "--out", s(&c)]);
    assert_eq!(sha(&a), sha(&b));
    assert_ne!(sha(&a), sha(&c));
}

#[test]
fn bad_config_exits_with_status_2() {
    let env = Env::new();
    let out = env.scd(&["--set", "data.patch_size=5", "gen-data", "--out", s(&env.path("x.scd"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("patch_size"));
    let out = env.scd(&[
        "--set",
        "train.no_such_key=1",
        "gen-data",
        "--out",
        s(&env.path("x.scd")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_resume_matches_uninterrupted_run() {
    let env = Env::new();
    let data = env.path("d.scd");
    env.ok(&["gen-data", "--out", s(&data)]);
    let (full, half) = (env.path("full.ckpt"), env.path("half.ckpt"));
    env.ok(&["train", "--data", s(&data), "--out", s(&full)]);
    env.ok(&["train", "--data", s(&data), "--out", s(&half), "--steps", "3"]);
    env.ok(&["train", "--data", s(&data), "--out", s(&half), "--resume", s(&half)]);
    assert_eq!(sha(&full), sha(&half));

    let records = |name: &str| -> Vec<serde_json::Value> {
        fs::read_to_string(env.path(name))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wallclock_ms");
                v
            })
            .collect()
    };
    let log = records("full.ckpt.log.jsonl");
    assert_eq!(log.len(), 6);
    assert_eq!(log, records("half.ckpt.log.jsonl"));

    let out = env.scd(&[
        "--set",
        "model.hidden=32",
        "train",
        "--data",
        s(&data),
        "--out",
        s(&half),
        "--resume",
        s(&full),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rollout_and_probes_run_from_a_checkpoint() {
    let env = Env::new();
    let (data, ckpt) = (env.path("d.scd"), env.path("m.ckpt"));
    env.ok(&["gen-data", "--out", s(&data)]);
    env.ok(&["train", "--data", s(&data), "--out", s(&ckpt)]);

    let (r1, r2) = (env.path("r1.scd"), env.path("r2.scd"));
    let metrics = env.path("m.csv");
    let args = |out: &PathBuf| {
        vec![
            "rollout".to_string(),
            "--ckpt".into(),
            s(&ckpt).into(),
            "--out".into(),
            s(out).into(),
            "--data".into(),
            s(&data).into(),
            "--capture-attn".into(),
            "--capture-layers".into(),
            "all".into(),
        ]
    };
    let a1: Vec<String> = args(&r1)
        .into_iter()
        .chain(["--metrics".into(), s(&metrics).into()])
        .collect();
    env.ok(&a1.iter().map(String::as_str).collect::<Vec<_>>());
    env.ok(&args(&r2).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(sha(&r1), sha(&r2));
    assert_eq!(fs::read_to_string(&metrics).unwrap().lines().count(), 4);

    let trace = env.path("r1.scd.trace");
    let sim = env.ok(&["probe", "step-sim", "--trace", s(&trace), "--layer", "1"]);
    let rows: Vec<String> = String::from_utf8(sim.stdout)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    assert!(rows.len() >= 4);
    for kind in ["mean-distance", "pca", "xframe-mass", "trend"] {
        let out = env.ok(&["probe", kind, "--trace", s(&trace)]);
        assert!(!out.stdout.is_empty(), "{kind} printed nothing");
    }
    let loo = env.ok(&["probe", "leave-one-out", "--ckpt", s(&ckpt), "--data", s(&data)]);
    assert_eq!(String::from_utf8(loo.stdout).unwrap().lines().count(), 3);

    let inspect = env.ok(&["inspect", s(&r1)]);
    let doc: serde_json::Value = serde_json::from_slice(&inspect.stdout).unwrap();
    assert_eq!(doc["kind"], "frames");
}

#[test]
fn bench_reports_matching_counts() {
    let env = Env::new();
    let report = env.path("bench.json");
    env.ok(&["bench", "--out", s(&report)]);
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let r = &doc["reports"][0];
    assert_eq!(r["block_invocations"], r["expected_invocations"]);
    assert!(r["sec_per_frame"].as_f64().unwrap() > 0.0);
}
