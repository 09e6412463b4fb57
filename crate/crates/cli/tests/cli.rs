use std::path::Path;
use std::process::{Command, Output};

fn latefuse(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latefuse"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn paper_preset_prints_hyperparameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = latefuse(dir.path(), &["--preset", "paper", "eval"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("lora rank"), "{text}");
    assert!(text.contains("AdamW lr"), "{text}");
    assert!(!dir.path().join("eval.json").exists());
}

#[test]
fn stage_out_of_order_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = latefuse(dir.path(), &["--preset", "smoke", "stage2"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn bad_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let mut doc: serde_json::Value = serde_json::from_str(&latefuse_config_text()).unwrap();
    doc["lora"]["rank"] = serde_json::json!(0);
    std::fs::write(&cfg, doc.to_string()).unwrap();
    let o = latefuse(&dir.path().join("run"), &["--config", cfg.to_str().unwrap(), "pretrain"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("lora.rank"), "{}", stderr(&o));
}

fn latefuse_config_text() -> String {
    latefuse::config::Config::smoke().to_canonical_json()
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(latefuse(dir.path(), &["no-such-command"]).status.code(), Some(1));
    assert_eq!(latefuse(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn smoke_run_produces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    for step in ["fit-codec", "gen-data", "pretrain", "stage1", "stage2", "stage3", "eval", "report"] {
        let o = latefuse(out, &["--preset", "smoke", step]);
        assert_eq!(o.status.code(), Some(0), "{step}: {}", stderr(&o));
    }
    for file in ["codec.mslb", "eval.json", "report.csv", "report.txt"] {
        assert!(out.join(file).exists(), "{file} missing");
    }
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert!(csv.starts_with("model,source,text_accuracy_pct,tts_cer_pct"));
    assert_eq!(csv.lines().count(), 5);
    assert!(!out.join(".lock").exists());

    let o = latefuse(out, &["--preset", "smoke", "synth", "--text", "0f"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}
