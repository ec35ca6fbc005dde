use std::path::Path;
use std::process::{Command, Output};

fn promptseg(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptseg"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn toy() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let out = promptseg(dir.path(), &["make-toy", "toy", "--scenes", "3", "--pairs", "60", "--shapes", "6"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    dir
}

#[test]
fn segment_writes_the_per_image_files() {
    let dir = toy();
    let out = promptseg(
        dir.path(),
        &["--config", "toy/config.json", "--out-dir", "seg", "segment", "--input", "toy/scenes/images"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let seg = dir.path().join("seg");
    for ext in ["mask.png", "sal", "sal.json", "prompts.json", "panel.png"] {
        assert!(seg.join(format!("scene_00.{ext}")).exists(), "missing scene_00.{ext}");
    }
    assert!(seg.join("config.resolved.json").exists());
}

#[test]
fn missing_inputs_exit_with_code_2() {
    let dir = toy();
    let out = promptseg(dir.path(), &["--config", "toy/config.json", "finetune", "--data", "nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    let out = promptseg(
        dir.path(),
        &["--config", "toy/config.json", "predict", "--ensemble", "nowhere", "--input", "toy/shapes_test/images"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = toy();
    std::fs::write(dir.path().join("bad.json"), r#"{"sed": 3}"#).unwrap();
    let out = promptseg(dir.path(), &["--config", "bad.json", "eval-seg", "--pred", "a", "--gt", "b"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn a_bad_image_in_a_batch_gives_partial_failure() {
    let dir = toy();
    std::fs::write(dir.path().join("toy/scenes/images/broken.png"), b"not a png").unwrap();
    let out = promptseg(
        dir.path(),
        &["--config", "toy/config.json", "--out-dir", "seg", "segment", "--input", "toy/scenes/images"],
    );
    assert_eq!(out.status.code(), Some(4));
    let status = std::fs::read_to_string(dir.path().join("seg/status.json")).unwrap();
    assert!(status.contains("broken"));
    assert!(dir.path().join("seg/scene_00.mask.png").exists());
}

#[test]
fn divergent_training_exits_with_code_3() {
    let dir = toy();
    let cfg = std::fs::read_to_string(dir.path().join("toy/config.json")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&cfg).unwrap();
    v["finetune"]["learning_rate"] = serde_json::json!(1e300);
    std::fs::write(dir.path().join("hot.json"), v.to_string()).unwrap();
    let out = promptseg(dir.path(), &["--config", "hot.json", "--out-dir", "ft", "finetune", "--data", "toy/corpus"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}
