use std::path::PathBuf;
use std::process::{Command, Output};

fn relcon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_relcon"))
        .args(args)
        .output()
        .unwrap()
}

fn fixture() -> PathBuf {
    [
        env!("CARGO_MANIFEST_DIR"),
        "..",
        "core",
        "fixtures",
        "mini_relations.json",
    ]
    .iter()
    .collect()
}

#[test]
fn dataset_validate_lists_relations() {
    let out = relcon(&["dataset", "validate", fixture().to_str().unwrap()]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("OK: 6 relations"), "{text}");
    assert!(text.contains("capital of nation: 8 samples, 8 objects  (one-to-one)"));
}

#[test]
fn ztest_prints_p_value() {
    let out = relcon(&["ztest", "--a", "2799,3324", "--b", "2696,3324"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let p: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("p = "))
        .unwrap()
        .parse()
        .unwrap();
    assert!((p - 8.49e-4).abs() < 1e-6, "{p}");
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"dataset": "missing.json", "model": {"checkpoint": "m.relcon"}, "output_dir": "out"}"#,
    )
    .unwrap();
    let out = relcon(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(
        err.contains("`dataset`") && err.contains("missing.json"),
        "{err}"
    );

    assert_eq!(
        relcon(&["ztest", "--a", "5,3", "--b", "1,2"]).status.code(),
        Some(2)
    );
    assert_eq!(relcon(&["nonsense"]).status.code(), Some(2));
}

#[test]
fn report_requires_run_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().to_str().unwrap();
    let out = relcon(&["report", "--runs", runs, "--out", runs]);
    assert_eq!(out.status.code(), Some(1));
}
