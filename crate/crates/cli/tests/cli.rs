use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
preset = "smoke"

[steps]
pretrain = 4
stage1 = 3
stage2 = 2
join_stage1 = 3
join_stage2 = 2

[dataset]
scenes = 8

[eval]
scenes = 4
gap_scenes = 4
noise_sigmas = [0.0, 0.3]
"#;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_commonspace"))
        .arg("--config")
        .arg(dir.join("tiny.toml"))
        .args(args)
        .env("COMMONSPACE_OUT", dir.join("run"))
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{args:?} failed: {stderr}");
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    dir
}

#[test]
fn every_subcommand_runs_in_order() {
    let dir = setup();
    let d = dir.path();
    let out = ok(d, &["pretrain"]);
    assert!(out.contains("homogeneous/m1") && out.contains("homogeneous/protocol"), "{out}");
    assert!(ok(d, &["negotiate"]).contains("negotiate/stage1"));
    assert!(ok(d, &["adapt"]).contains("negotiate/stage2"));
    let out = ok(d, &["join"]);
    assert!(out.contains("join/m4/stage1") && out.contains("join/protocol/stage2"), "{out}");
    assert!(ok(d, &["eval"]).contains("AP@loose"));
    assert!(ok(d, &["domain-gap"]).contains("KL"));
    ok(d, &["report"]);

    let run_dir = d.join("run");
    for f in ["config.toml", "freeze.json", "logs/train.jsonl", "models/progress.json", "reports/eval.json", "report/report.md", "report/metrics.json"] {
        assert!(run_dir.join(f).exists(), "missing {f}");
    }
    let freeze: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run_dir.join("freeze.json")).unwrap()).unwrap();
    assert!(freeze.as_array().unwrap().len() >= 6);
    let md = std::fs::read_to_string(run_dir.join("report/report.md")).unwrap();
    assert!(md.contains("m1+m2 | common"), "{md}");
}

#[test]
fn stages_out_of_order_fail_cleanly() {
    let dir = setup();
    let out = run(dir.path(), &["negotiate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m1"));
}

#[test]
fn tampered_frozen_module_exits_with_freeze_status() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["pretrain", "--agent", "m1", "--agent", "m2", "--agent", "m3"]);
    let before = std::fs::read_to_string(d.join("run/models/perception/m2.json")).unwrap();
    let out = run(d, &["--set", "fault_injection=m2.encoder", "negotiate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("m2.encoder"));
    assert!(!d.join("run/models/negotiator.json").exists());
    assert_eq!(std::fs::read_to_string(d.join("run/models/perception/m2.json")).unwrap(), before);
    // the failing manifest stays on record, so later commands keep failing
    assert_eq!(run(d, &["eval"]).status.code(), Some(2));
}

#[test]
fn unknown_override_is_rejected() {
    let dir = setup();
    let out = run(dir.path(), &["--set", "steps.stage9=1", "pretrain"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage9"));
}
