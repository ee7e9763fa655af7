use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bbm(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bbm"))
        .args(args)
        .current_dir(cwd)
        .env_remove("BBM_WORKERS")
        .env_remove("BBM_OUTPUT_ROOT")
        .output()
        .unwrap()
}

#[test]
fn same_seed_gives_identical_csv() {
    let dir = tempfile::tempdir().unwrap();
    for (out, workers) in [("a", "1"), ("b", "2")] {
        let o = bbm(
            &[
                "sample-zeta",
                "--seed",
                "3",
                "--replicas",
                "20",
                "--workers",
                workers,
                "--out",
                out,
            ],
            dir.path(),
        );
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(dir.path().join("a/zeta.csv")).unwrap();
    let b = fs::read(dir.path().join("b/zeta.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn zero_replicas_exits_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = bbm(
        &["simulate-bbm", "--replicas", "0", "--out", "x"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("replicas"));
}

#[test]
fn unknown_parameter_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = bbm(&["sample-zeta", "--set", "vlist=1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_file_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "# small run\nt = 2\nseed = 11\nreplicas = 4\n",
    )
    .unwrap();
    let o = bbm(
        &["simulate-bbm", "--config", "run.cfg", "--out", "first"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = fs::read_to_string(dir.path().join("first/manifest.json")).unwrap();
    assert!(manifest.contains("\"t\": \"2\""));
    let o = bbm(
        &["replay", "first/manifest.json", "--out", "second"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(dir.path().join("first/bbm.csv")).unwrap(),
        fs::read(dir.path().join("second/bbm.csv")).unwrap()
    );
}

#[test]
fn output_root_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_bbm"))
        .args(["sample-zeta", "--replicas", "2", "--out", "z"])
        .current_dir(dir.path())
        .env("BBM_OUTPUT_ROOT", "root")
        .env("BBM_WORKERS", "1")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("root/z/zeta.csv").exists());
}
