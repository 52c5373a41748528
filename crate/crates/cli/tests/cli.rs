use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = r#"
[synth]
n_match = 60
n_dang_src = 20
n_dang_tgt = 30
community_count = 4
[model]
warmup_epochs = 5
m_step_epochs = 1
max_em_iters = 5
align_epochs = 10
[model.encoder]
dim = 16
n_proxy = 4
clf_hidden = 8
"#;

fn lambda(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_lambda"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

/// A temp dir holding `c.toml` and a generated pair under `data/`.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("seed = 3\n[data]\ndir = {:?}\n{SMALL}", p(dir.path(), "data"));
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let o = lambda(&["synth", "-c", &p(dir.path(), "c.toml"), "-o", &p(dir.path(), "data")], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_owned()
}

#[test]
fn unknown_suite_is_a_usage_error() {
    let o = lambda(&["verify", "bogus"], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown suite"));
}

#[test]
fn lemma_suite_passes_and_reports_json() {
    let dir = tempfile::tempdir().unwrap();
    let o = lambda(&["verify", "lemmas", "-o", &p(dir.path(), "v")], &[]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 2);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("v/verify.json")).unwrap()).unwrap();
    assert!(v.as_array().unwrap().iter().all(|c| c["pass"] == true));
}

#[test]
fn missing_triples_and_bad_config_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir(dir.path().join("empty")).unwrap();
    let cfg = format!("seed = 1\n[data]\ndir = {:?}\n", p(dir.path(), "empty"));
    fs::write(dir.path().join("c.toml"), cfg).unwrap();
    let o = lambda(&["detect", "-c", &p(dir.path(), "c.toml"), "-o", &p(dir.path(), "run")], &[]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("triples_1"));

    fs::write(dir.path().join("noseed.toml"), "[model]\nlr = 0.1\n").unwrap();
    let o = lambda(&["detect", "-c", &p(dir.path(), "noseed.toml"), "-o", &p(dir.path(), "run")], &[]);
    assert_eq!(code(&o), 1);

    let o = lambda(&["detect", "--no-such-flag"], &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn detect_align_eval_round_trip() {
    let ws = workspace();
    let (c, run) = (&p(ws.path(), "c.toml"), &p(ws.path(), "run"));
    let o = lambda(&["detect", "-c", c, "-o", run, "--set", "model.tau_align=0"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["detection.json", "history.csv", "checkpoint.bin", "manifest.json"] {
        assert!(ws.path().join("run").join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(ws.path().join("run/history.csv")).unwrap();
    assert!(history.starts_with("step,phase,loss,pi_p,pi_p_u\n"));

    let o = lambda(&["align", "-c", c, "-o", run, "--set", "model.tau_align=0"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pairs = fs::read_to_string(ws.path().join("run/pairs.csv")).unwrap();
    assert!(pairs.starts_with("src_id,tgt_id,score\n"));
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(ws.path().join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    let o = lambda(&["eval", "--run", run, "--truth", &p(ws.path(), "data"), "-o", &p(ws.path(), "ev")], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a = fs::read_to_string(ws.path().join("run/metrics.json")).unwrap();
    let b = fs::read_to_string(ws.path().join("ev/metrics.json")).unwrap();
    assert_eq!(a, b);
    let view: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(view["setting"], "relaxed");
}

#[test]
fn not_alignable_gates_alignment() {
    let ws = workspace();
    let (c, run) = (&p(ws.path(), "c.toml"), &p(ws.path(), "run"));
    let o = lambda(&["detect", "-c", c, "-o", run], &[("LAMBDA_MODEL__TAU_ALIGN", "1.0")]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let o = lambda(&["align", "-c", c, "-o", run], &[]);
    assert_eq!(code(&o), 3);
    assert!(!ws.path().join("run/pairs.csv").exists());
    let o = lambda(&["align", "-c", c, "-o", run, "--force"], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn detection_is_reproducible() {
    let ws = workspace();
    let c = &p(ws.path(), "c.toml");
    for run in ["r1", "r2"] {
        let o = lambda(&["detect", "-c", c, "-o", &p(ws.path(), run), "--set", "model.tau_align=0"], &[]);
        assert!(matches!(code(&o), 0 | 2));
    }
    for f in ["detection.json", "history.csv", "checkpoint.bin", "manifest.json"] {
        let a = fs::read(ws.path().join("r1").join(f)).unwrap();
        let b = fs::read(ws.path().join("r2").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }
}
