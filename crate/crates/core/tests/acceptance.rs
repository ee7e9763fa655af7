//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//!
//! The cluster pools are expensive (tens of minutes on one core), so they
//! are cached as JSON lines under the cargo target directory and reused
//! when the sampling parameters match. Delete the cache to resample.

use std::path::PathBuf;

use bbm_core::bessel::{sample_zeta, ZetaGrid};
use bbm_core::cluster::{
    auto_truncation, tail_event_frequency, ClusterOptions, ClusterSample, ClusterSampler,
    DEFAULT_CLUSTER_EVENT_CAP,
};
use bbm_core::limit::{assemble_from_pool, draw_z, estimate_cstar, ratio_statistic, ZSource};
use bbm_core::runner::{depth_grid, read_pool, summarize_theorem2, TrendCheck};
use bbm_core::stats::{iqr, median};
use bbm_core::validators::{
    ballot_asymptotic_check, ballot_check, bessel_checks, many_to_one_checks,
    martingale_mean_check, tip_poisson_checks, yule_checks, zeta_checks, TestReport,
};
use bbm_core::StreamKey;
use rayon::prelude::*;

const SEED: u64 = 20_241;
const POOL_CHUNK: u64 = 1;

/// Criteria that are known not to be reachable at this scale; they still
/// run and print FAIL, but do not fail the test.
const KNOWN_SHORTFALLS: &[u32] = &[];

struct Verdict {
    id: u32,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn verdict(id: u32, name: &'static str, reports: &[TestReport]) -> Verdict {
    let failed: Vec<String> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{} ({} vs {})", r.name, r.statistic, r.threshold))
        .collect();
    Verdict {
        id,
        name,
        passed: failed.is_empty() && !reports.is_empty(),
        detail: if failed.is_empty() {
            format!("{} checks", reports.len())
        } else {
            format!("failed: {}", failed.join("; "))
        },
    }
}

fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-cache");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// Per-cluster event budget for the acceptance pools. Replicas that stay
/// under a cap are identical for any larger cap, so raising it only
/// changes the replicas that failed.
const POOL_EVENT_CAP: u64 = 20_000_000_000;

/// Successful clusters of a pool and the number of failed replicas.
///
/// The cache holds one line per replica (`null` for a failure) and a
/// sidecar with the event cap the failures were produced under. Missing
/// replicas, and failures from a smaller cap, are sampled in chunks and
/// written back after each chunk, so an interrupted run resumes.
fn pool(
    name: &str,
    v_max: f64,
    step: f64,
    marks: &[f64],
    n: u64,
    seed: u64,
) -> (Vec<ClusterSample>, usize) {
    let r = auto_truncation(v_max).unwrap().r_trunc;
    let path = cache_dir().join(format!("{name}-v{v_max}-step{step}-n{n}-seed{seed}.jsonl"));
    let cap_path = path.with_extension("cap");
    let mut lines: Vec<String> = std::fs::read_to_string(&path)
        .map(|t| {
            t.lines()
                .filter(|l| !l.trim().is_empty())
                .map(String::from)
                .collect()
        })
        .unwrap_or_default();
    let old_cap: u64 = std::fs::read_to_string(&cap_path)
        .ok()
        .and_then(|t| t.trim().parse().ok())
        .unwrap_or(DEFAULT_CLUSTER_EVENT_CAP);
    lines.resize(n as usize, String::new());
    let todo: Vec<u64> = (0..n)
        .filter(|&i| {
            let l = &lines[i as usize];
            l.is_empty() || (l == "null" && old_cap < POOL_EVENT_CAP)
        })
        .collect();
    if !todo.is_empty() {
        let depths = depth_grid(marks, step);
        let opts = ClusterOptions {
            event_cap: POOL_EVENT_CAP,
            ..ClusterOptions::default()
        };
        let sampler = ClusterSampler::new(&depths, r, opts).unwrap();
        let start = std::time::Instant::now();
        for (k, chunk) in todo.chunks(POOL_CHUNK as usize).enumerate() {
            let sampled: Vec<String> = chunk
                .par_iter()
                .map(|&i| {
                    sampler
                        .sample(StreamKey::replica(seed, i))
                        .map(|c| serde_json::to_string(&c).unwrap())
                        .unwrap_or_else(|_| "null".to_string())
                })
                .collect();
            for (&i, line) in chunk.iter().zip(sampled) {
                lines[i as usize] = line;
            }
            let body: String = lines
                .iter()
                .take_while(|l| !l.is_empty())
                .map(|l| format!("{l}\n"))
                .collect();
            let tmp = path.with_extension("tmp");
            std::fs::write(&tmp, body).unwrap();
            std::fs::rename(&tmp, &path).unwrap();
            eprintln!(
                "{name} pool: {}/{} sampled after {:.0} s",
                (k * POOL_CHUNK as usize + chunk.len()),
                todo.len(),
                start.elapsed().as_secs_f64()
            );
        }
        std::fs::write(&cap_path, POOL_EVENT_CAP.to_string()).unwrap();
    }
    let clusters = read_pool(&path).unwrap();
    let failed = n as usize - clusters.len();
    (clusters, failed)
}

fn yule(key: StreamKey) -> Verdict {
    verdict(
        1,
        "population law",
        &yule_checks(2.0, 20_000, 0.01, key).unwrap(),
    )
}

fn many_to_one(key: StreamKey) -> Verdict {
    let mut reports = Vec::new();
    for (i, s) in [4.0, 6.0].into_iter().enumerate() {
        reports
            .extend(many_to_one_checks(s, &[0.0, 1.0, 2.0], 10_000, key.child(i as u64)).unwrap());
    }
    verdict(2, "many-to-one mean", &reports)
}

fn martingale(key: StreamKey) -> Verdict {
    let reports: Vec<TestReport> = [1.0, 2.0, 4.0]
        .into_iter()
        .enumerate()
        .map(|(i, t)| martingale_mean_check(t, 10_000, key.child(i as u64)).unwrap())
        .collect();
    verdict(3, "martingale mean", &reports)
}

fn ballot(key: StreamKey) -> Verdict {
    let mut reports: Vec<TestReport> = [(1.0, 1.0, 2.0), (1.0, 1.0, 10.0), (0.5, 2.0, 10.0)]
        .into_iter()
        .enumerate()
        .map(|(i, (x, y, t))| ballot_check(x, y, t, 100_000, 1000, key.child(i as u64)).unwrap())
        .collect();
    reports.push(ballot_asymptotic_check(1.0, 1.0, 1000.0).unwrap());
    verdict(4, "bridge ballot oracle", &reports)
}

fn bessel(key: StreamKey) -> Verdict {
    verdict(
        5,
        "Bessel-3 sampler",
        &bessel_checks(100_000, 9.0, 0.01, key).unwrap(),
    )
}

fn zeta(key: StreamKey) -> Verdict {
    verdict(
        6,
        "zeta sampler stability",
        &zeta_checks(10_000, &[2.0, 3.0, 4.0], key).unwrap(),
    )
}

fn tips(key: StreamKey) -> Verdict {
    verdict(
        9,
        "tip process counts",
        &tip_poisson_checks(1.0, 8.0, &[2.0, 4.0, 6.0], 10_000, 0.01, key).unwrap(),
    )
}

/// Criteria 7 and 8 from one pool measured at 8, 12 and 16.
fn fluctuations(clusters: &[ClusterSample], failed: usize, key: StreamKey) -> (Verdict, Verdict) {
    let vs = [8.0, 12.0, 16.0];
    let grid = ZetaGrid::default();
    let n_zeta = 3 * clusters.len();
    let zeta: Vec<f64> = (0..n_zeta as u64)
        .into_par_iter()
        .map(|i| sample_zeta(&grid, key.child(i)).unwrap().value)
        .collect();
    let mut counts: Vec<Vec<Option<u64>>> = clusters
        .iter()
        .map(|c| vs.iter().map(|&v| Some(c.count_at(v).unwrap())).collect())
        .collect();
    counts.extend((0..failed).map(|_| vec![None; vs.len()]));
    let rows = summarize_theorem2(&vs, &counts, &zeta).unwrap();
    let check = TrendCheck::evaluate(&rows).unwrap();
    let enough = rows.iter().all(|r| r.n >= 500);
    let table: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "v={} n={} ks={:.4} median={:.4} undefined={:.4} band=[{:.3},{:.3}] log_ratio={:.4}",
                r.v, r.n, r.ks, r.median_statistic, r.undefined_frequency, r.zeta_q10, r.zeta_q90, r.median_log_ratio
            )
        })
        .collect();
    let fl = Verdict {
        id: 7,
        name: "fluctuation trend against zeta",
        passed: enough && check.fluctuation_ok(),
        detail: format!("{} | {:?}", table.join("; "), check),
    };
    let gr = Verdict {
        id: 8,
        name: "level-set growth trend",
        passed: enough && check.growth_ok(),
        detail: rows
            .iter()
            .map(|r| format!("v={} median log C/(sqrt2 v)={:.4}", r.v, r.median_log_ratio))
            .collect::<Vec<_>>()
            .join("; "),
    };
    (fl, gr)
}

fn ratio_trend(clusters: &[ClusterSample], key: StreamKey) -> Verdict {
    let cstar = estimate_cstar(clusters, &[8.0, 10.0], key.child(0)).unwrap();
    let vs = [6.0, 12.0];
    let z_source = ZSource::Proxy { t: 8.0 };
    let n = 200u64;
    let ratios: Vec<Option<[f64; 2]>> = (0..n)
        .into_par_iter()
        .map(|a| {
            let k = key.child(1).child(a);
            let z = draw_z(z_source, k.child(0)).ok()?;
            let asm = assemble_from_pool(z, &vs, 12.0, clusters, k.child(1)).ok()?;
            Some([0, 1].map(|j| ratio_statistic(asm.counts[j], z, cstar.value, vs[j]).unwrap()))
        })
        .collect();
    let ok: Vec<[f64; 2]> = ratios.iter().flatten().copied().collect();
    let r6: Vec<f64> = ok.iter().map(|r| r[0]).collect();
    let r12: Vec<f64> = ok.iter().map(|r| r[1]).collect();
    let (m12, i6, i12) = (median(&r12), iqr(&r6), iqr(&r12));
    Verdict {
        id: 10,
        name: "assembled ratio trend",
        passed: cstar.stable() && ok.len() as u64 >= n && (0.5..=2.0).contains(&m12) && i12 < i6,
        detail: format!(
            "cstar={:.4} [{:.4},{:.4}] per-depth {} stable={} | assemblies={}/{} median(12)={:.4} iqr(6)={:.4} iqr(12)={:.4}",
            cstar.value,
            cstar.ci_low,
            cstar.ci_high,
            cstar
                .per_depth
                .iter()
                .map(|d| format!("v={}:{:.4}[{:.4},{:.4}]", d.v, d.estimate, d.ci_low, d.ci_high))
                .collect::<Vec<_>>()
                .join(","),
            cstar.stable(),
            ok.len(),
            n,
            m12,
            i6,
            i12
        ),
    }
}

fn tail_diagnostic(clusters: &[ClusterSample], failed: usize) -> Verdict {
    let us = [6.0, 9.0, 12.0];
    let f: Vec<f64> = us
        .iter()
        .map(|&u| tail_event_frequency(clusters, u, 0.0, 1.0).unwrap())
        .collect();
    Verdict {
        id: 11,
        name: "cluster tail-event diagnostic",
        passed: failed == 0 && clusters.len() >= 1000 && f.windows(2).all(|w| w[1] <= w[0]),
        detail: format!(
            "n={} failed={failed} freq(6)={:.4} freq(9)={:.4} freq(12)={:.4}",
            clusters.len(),
            f[0],
            f[1],
            f[2]
        ),
    }
}

#[test]
fn acceptance() {
    let root = StreamKey::from_seed(SEED);
    let mut verdicts = vec![
        yule(root.child(1)),
        many_to_one(root.child(2)),
        martingale(root.child(3)),
        ballot(root.child(4)),
        bessel(root.child(5)),
        zeta(root.child(6)),
    ];
    let (deep, deep_failed) = pool(
        "deep",
        16.0,
        1.0 / 16.0,
        &[8.0, 10.0, 12.0, 16.0],
        500,
        SEED,
    );
    let (f7, f8) = fluctuations(&deep, deep_failed, root.child(7));
    verdicts.push(f7);
    verdicts.push(f8);
    verdicts.push(tips(root.child(9)));
    verdicts.push(ratio_trend(&deep, root.child(10)));
    let (wide, wide_failed) = pool("wide", 12.0, 0.25, &[6.0, 9.0, 12.0], 1000, SEED + 1);
    verdicts.push(tail_diagnostic(&wide, wide_failed));
    verdicts.sort_by_key(|v| v.id);

    for v in &verdicts {
        println!(
            "criterion {:>2} {:<32} {} {}",
            v.id,
            v.name,
            if v.passed { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    let unexpected: Vec<u32> = verdicts
        .iter()
        .filter(|v| !v.passed && !KNOWN_SHORTFALLS.contains(&v.id))
        .map(|v| v.id)
        .collect();
    assert!(unexpected.is_empty(), "criteria failed: {unexpected:?}");
}
