use std::fs;

use bbm_core::runner::{self, Command, ExperimentConfig, RunStatus, SCHEMA_LINE};
use bbm_core::types::RunManifest;
use bbm_core::Error;
use proptest::prelude::*;

fn config(command: Command, out: &std::path::Path, pairs: &[(&str, &str)]) -> ExperimentConfig {
    let mut c = ExperimentConfig::new(command);
    c.out_dir = out.to_path_buf();
    for (k, v) in pairs {
        c.set(k, v).unwrap();
    }
    c
}

#[test]
fn outputs_do_not_depend_on_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let mut a = config(
        Command::SimulateBbm,
        &dir.path().join("a"),
        &[
            ("t", "3"),
            ("seed", "9"),
            ("replicas", "12"),
            ("workers", "1"),
        ],
    );
    let ra = runner::run(&a).unwrap();
    a.workers = 3;
    a.out_dir = dir.path().join("b");
    let rb = runner::run(&a).unwrap();
    assert_eq!(ra.status, RunStatus::Success);
    assert_eq!(
        ra.manifest.per_replica_digest,
        rb.manifest.per_replica_digest
    );
    let fa = fs::read(dir.path().join("a/bbm.csv")).unwrap();
    let fb = fs::read(dir.path().join("b/bbm.csv")).unwrap();
    assert_eq!(fa, fb);
    assert!(String::from_utf8(fa).unwrap().starts_with(SCHEMA_LINE));
}

#[test]
fn manifest_round_trip_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        Command::SampleCluster,
        &dir.path().join("run"),
        &[("vlist", "1,2"), ("seed", "4"), ("replicas", "6")],
    );
    let first = runner::run(&cfg).unwrap();
    let text = fs::read_to_string(dir.path().join("run/manifest.json")).unwrap();
    let manifest = RunManifest::from_json(&text).unwrap();
    assert_eq!(manifest, first.manifest);
    let mut again = ExperimentConfig::from_manifest(&manifest).unwrap();
    again.out_dir = dir.path().join("replay");
    let second = runner::run(&again).unwrap();
    assert_eq!(
        first.manifest.per_replica_digest,
        second.manifest.per_replica_digest
    );
    assert_eq!(
        fs::read(dir.path().join("run/clusters.csv")).unwrap(),
        fs::read(dir.path().join("replay/clusters.csv")).unwrap()
    );
}

#[test]
fn zero_replicas_is_a_parameter_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Command::SampleZeta, dir.path(), &[("replicas", "0")]);
    match runner::run(&cfg) {
        Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "replicas"),
        other => panic!("expected a replicas error, got {other:?}"),
    }
}

#[test]
fn config_file_then_overrides() {
    let mut c = ExperimentConfig::new(Command::SampleZeta);
    c.apply_text("command = sample-zeta\nseed = 5 # fixed\nreplicas = 7\nrounds = 2\n")
        .unwrap();
    c.set("replicas", "8").unwrap();
    assert_eq!((c.seed, c.replicas), (5, 8));
    let p = c.resolved_parameters();
    assert_eq!(p["rounds"], "2");
    assert_eq!(p["replicas"], "8");
}

#[test]
fn report_reproduces_theorem2_summary() {
    let dir = tempfile::tempdir().unwrap();
    let t2 = config(
        Command::Theorem2,
        &dir.path().join("t2"),
        &[
            ("vlist", "1,2"),
            ("replicas", "10"),
            ("zeta-replicas", "50"),
        ],
    );
    runner::run(&t2).unwrap();
    let rep = config(
        Command::Report,
        &dir.path().join("rep"),
        &[("input", dir.path().join("t2").to_str().unwrap())],
    );
    runner::run(&rep).unwrap();
    let a = runner::read_table(&dir.path().join("t2/summary.csv")).unwrap();
    let b = runner::read_table(&dir.path().join("rep/report.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn theorem1_requires_pool_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let pool = config(
        Command::SampleCluster,
        &dir.path().join("pool"),
        &[("vlist", "1,2"), ("replicas", "100")],
    );
    runner::run(&pool).unwrap();
    let path = dir.path().join("pool/pool.jsonl");
    let t1 = config(
        Command::Theorem1,
        &dir.path().join("t1"),
        &[
            ("v", "1,3"),
            ("cluster-pool", path.to_str().unwrap()),
            ("vfit", "1,2"),
            ("z", "1"),
        ],
    );
    assert!(matches!(runner::run(&t1), Err(Error::DepthCoverage { .. })));
    let mut ok = t1.clone();
    ok.set("v", "0.5,1").unwrap();
    ok.set("assemblies", "20").unwrap();
    let out = runner::run(&ok).unwrap();
    assert!(matches!(
        out.status,
        RunStatus::Success | RunStatus::PartialFailure { .. }
    ));
    let rows = runner::read_table(&dir.path().join("t1/theorem1.csv")).unwrap();
    assert_eq!(rows.len(), 40);
}

proptest! {
    #[test]
    fn key_value_text_round_trips(pairs in proptest::collection::btree_map("[a-z][a-z-]{0,8}", "[A-Za-z0-9.,:]{0,12}", 0..8)) {
        let text: String = pairs.iter().map(|(k, v)| format!("{k} = {v}\n# note\n")).collect();
        let parsed = runner::parse_key_values(&text).unwrap();
        let expect: Vec<(String, String)> = pairs.into_iter().collect();
        prop_assert_eq!(parsed, expect);
    }

    #[test]
    fn depth_grid_is_sorted_and_contains_vlist(step in 0.0f64..2.0, a in 0.1f64..3.0, b in 0.1f64..3.0) {
        let vlist = [a, a + b];
        let g = runner::depth_grid(&vlist, step);
        prop_assert!(g.windows(2).all(|w| w[0] < w[1]));
        for v in vlist {
            prop_assert!(g.iter().any(|d| (d - v).abs() < 1e-9));
        }
        prop_assert!(*g.last().unwrap() <= a + b + 1e-9);
    }
}
