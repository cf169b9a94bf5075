//! The `pichay` binary end to end.

use std::process::Command;

use pichay::analytics::synth::{session_a, write_suite};
use pichay::cli::{resolve_config, ConfigArgs};
use pichay::proxy::Mode;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pichay"))
}

#[test]
fn replay_reports_session_a() {
    let dir = tempfile::tempdir().unwrap();
    write_suite(dir.path(), &[session_a()]).unwrap();
    let out = bin().args(["replay", "--traces"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["gc_evictions"], 11);
    assert_eq!(v["paged_evictions"], 4);
    assert_eq!(v["faults"], 1);
    assert_eq!(v["fault_rate_paged"], 0.25);
}

#[test]
fn probe_prints_amplification() {
    let dir = tempfile::tempdir().unwrap();
    let paths = write_suite(dir.path(), &[session_a()]).unwrap();
    let out = bin().arg("probe").arg(&paths[0]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v[0]["amplification_factor"].as_f64().unwrap() > 1.0, "{v}");
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().args(["replay", "--traces", "x", "--zone", "sideways"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().arg("bogus").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn invalid_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.toml");
    std::fs::write(&p, "advisory_tokens = 200000\n").unwrap();
    let out = bin().args(["replay", "--traces", "x", "--config"]).arg(&p).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn file_env_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.toml");
    std::fs::write(&p, "mode = \"trim\"\ntau_user_turns = 6\nmin_size_bytes = 800\n").unwrap();
    let args = ConfigArgs { config_path: Some(p.clone()), ..Default::default() };
    let env = |k: &str| (k == "PICHAY_MODE").then(|| "observe".to_string());
    let cfg = resolve_config(&args, env).unwrap();
    assert_eq!(cfg.mode, Mode::Observe);
    assert_eq!(cfg.policy.tau_user_turns, 6);

    let args = ConfigArgs { config_path: Some(p), min_size_bytes: Some(900), mode: Some(Mode::Compact), ..Default::default() };
    let cfg = resolve_config(&args, env).unwrap();
    assert_eq!(cfg.mode, Mode::Compact);
    assert_eq!(cfg.policy.min_size_bytes, 900);
}

#[test]
fn help_lists_every_config_key() {
    let out = bin().arg("--help").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    for key in ["tau_user_turns", "min_size_bytes", "pin_half_life_turns", "skill_prefixes", "capture_path"] {
        assert!(text.contains(key), "missing {key}");
    }
}
