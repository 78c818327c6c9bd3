use std::path::PathBuf;
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("vitfreeze-cli-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn vitfreeze(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vitfreeze"))
        .args(args)
        .env_remove("VITFREEZE_THREADS")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn schedule_writes_csv_svg_and_echo() {
    let dir = scratch("schedule");
    let out = dir.join("out");
    let o = vitfreeze(&["schedule", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("schedule.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5 * 1000 + 1);
    let svg = std::fs::read_to_string(out.join("schedule.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 5);
    let echo = std::fs::read_to_string(out.join("config.resolved.json")).unwrap();
    assert!(echo.contains("\"t0\": 0.8"));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("step 256"), "{stdout}");
}

#[test]
fn predict_speedup_for_vit_b() {
    let dir = scratch("speedup");
    let cfg = dir.join("run.json");
    std::fs::write(&cfg, r#"{"trainer":{"steps":1000}}"#).unwrap();
    let out = dir.join("out");
    let o = vitfreeze(&[
        "predict-speedup",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--preset",
        "vit-b",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("speedup.json")).unwrap()).unwrap();
    let steps: Vec<u64> = summary["freeze_steps"].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).collect();
    assert_eq!(steps.len(), 13);
    assert_eq!(steps[0], 512);
    assert_eq!(steps[12], 1000);
    let ratio = summary["predicted_ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio < 1.0);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = scratch("seed");
    let out = dir.join("out");
    let o = vitfreeze(&["schedule", "--out", out.to_str().unwrap(), "--seed", "42"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let echo: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(echo["trainer"]["seed"], 42);
}

#[test]
fn invalid_config_fails_naming_the_key() {
    let dir = scratch("invalid");
    let cfg = dir.join("run.json");
    std::fs::write(&cfg, r#"{"schedule":{"t0":1.5}}"#).unwrap();
    let out = dir.join("out");
    let o = vitfreeze(&["schedule", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("schedule.t0"), "{}", stderr(&o));
    assert!(!out.join("schedule.csv").exists());
}

#[test]
fn unwritable_output_fails_before_any_work() {
    let dir = scratch("unwritable");
    let file = dir.join("file");
    std::fs::write(&file, "x").unwrap();
    let out = file.join("out");
    let o = vitfreeze(&["schedule", "--out", out.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("not writable"), "{}", stderr(&o));
}

#[test]
fn bad_thread_variable_is_rejected() {
    let dir = scratch("threads");
    let o = Command::new(env!("CARGO_BIN_EXE_vitfreeze"))
        .args(["schedule", "--out", dir.join("out").to_str().unwrap()])
        .env("VITFREEZE_THREADS", "lots")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(stderr(&o).contains("VITFREEZE_THREADS"), "{}", stderr(&o));
}

#[test]
fn unknown_preset_and_subcommand_are_usage_errors() {
    let o = vitfreeze(&["schedule", "--out", "/tmp/never", "--preset", "vit-h"]);
    assert!(!o.status.success());
    let o = vitfreeze(&["fly", "--out", "/tmp/never"]);
    assert!(!o.status.success());
}
