use std::path::{Path, PathBuf};
use std::process::Command;

use icrl_cli::config::ExperimentConfig;
use icrl_cli::pipeline::{cmd_eval, cmd_generate, cmd_probe, cmd_train, Ctx};
use icrl_core::envcore::persist::{load_manifest, load_taskset};
use icrl_core::envcore::{Split, Suite};

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny")
}

fn tiny_config() -> ExperimentConfig {
    ExperimentConfig::load(&fixture().join("config.json")).unwrap()
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for e in std::fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let dst = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &dst);
        } else {
            std::fs::copy(e.path(), dst).unwrap();
        }
    }
}

#[test]
fn eval_reproduces_fixture_csv() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = Ctx::new(tiny_config(), Some(dir.path().to_path_buf()), false);
    cmd_generate(&ctx).unwrap();
    std::fs::copy(fixture().join("model.json"), dir.path().join("model.json")).unwrap();
    copy_dir(&fixture().join("runs"), &dir.path().join("runs"));
    cmd_eval(&ctx).unwrap();
    let got = std::fs::read(dir.path().join("reports/fig2a.csv")).unwrap();
    let want = std::fs::read(fixture().join("expected/fig2a.csv")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn generate_is_deterministic_and_refuses_overwrite() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        cmd_generate(&Ctx::new(tiny_config(), Some(d.path().to_path_buf()), false)).unwrap();
    }
    let ma = std::fs::read(a.path().join("taskset/manifest.json")).unwrap();
    let mb = std::fs::read(b.path().join("taskset/manifest.json")).unwrap();
    assert_eq!(ma, mb);
    let err = cmd_generate(&Ctx::new(tiny_config(), Some(a.path().to_path_buf()), false)).unwrap_err();
    assert!(err.to_string().contains("--force"), "{err}");
    cmd_generate(&Ctx::new(tiny_config(), Some(a.path().to_path_buf()), true)).unwrap();
    assert!(load_manifest(&a.path().join("taskset")).is_ok());
}

#[test]
fn tree_test_split_is_full_trees() {
    let mut cfg = ExperimentConfig::preset(Suite::Tree);
    cfg.tasks = 40;
    cfg.env.trajectory_len = 20;
    let d = tempfile::tempdir().unwrap();
    cmd_generate(&Ctx::new(cfg, Some(d.path().to_path_buf()), false)).unwrap();
    let ts = load_taskset(&d.path().join("taskset")).unwrap();
    let test: Vec<_> = ts.split(Split::Test).collect();
    assert!(!test.is_empty());
    assert!(test.iter().all(|t| t.graph.is_full_tree()));
}

#[test]
fn probe_without_checkpoint_is_actionable() {
    let d = tempfile::tempdir().unwrap();
    let ctx = Ctx::new(tiny_config(), Some(d.path().to_path_buf()), false);
    cmd_generate(&ctx).unwrap();
    let err = cmd_probe(&ctx).unwrap_err().to_string();
    assert!(err.contains("icrl train"), "{err}");
}

#[test]
fn changed_config_is_refused() {
    let d = tempfile::tempdir().unwrap();
    cmd_generate(&Ctx::new(tiny_config(), Some(d.path().to_path_buf()), false)).unwrap();
    let mut cfg = tiny_config();
    cfg.env.sigma = 0.5;
    let err = cmd_train(&Ctx::new(cfg, Some(d.path().to_path_buf()), false)).unwrap_err().to_string();
    assert!(err.contains("different configuration"), "{err}");
}

#[test]
fn binary_exit_codes() {
    let bin = env!("CARGO_BIN_EXE_icrl");
    let usage = Command::new(bin).output().unwrap();
    assert_eq!(usage.status.code(), Some(2));
    let missing = Command::new(bin).args(["generate", "--config", "/nonexistent.json"]).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let d = tempfile::tempdir().unwrap();
    let cfg = fixture().join("config.json");
    let out = Command::new(bin)
        .args(["generate", "--out"])
        .arg(d.path())
        .env("ICRL_CONFIG", &cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.path().join("taskset/manifest.json").exists());

    // reports of the tiny config are absent, so table criteria cannot run
    let summary = d.path().join("acceptance.json");
    let acc = Command::new(bin)
        .args(["accept", "--config"])
        .arg(&cfg)
        .arg("--summary")
        .arg(&summary)
        .output()
        .unwrap();
    assert_eq!(acc.status.code(), Some(1));
    let text = String::from_utf8_lossy(&acc.stdout);
    assert!(text.contains("A3 NOT RUN"), "{text}");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(summary).unwrap()).unwrap();
    let ids: Vec<&str> = json["criteria"].as_array().unwrap().iter().map(|c| c["id"].as_str().unwrap()).collect();
    assert_eq!(ids, icrl_cli::accept::IDS);
}
