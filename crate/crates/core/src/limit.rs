//! The limiting extremal process: a Poisson cloud of tips with intensity
//! `Z e^{-sqrt2 u} du`, each dressed with an independent cluster.

use std::f64::consts::SQRT_2;

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::bbm::{derivative_martingale, simulate_bbm, PruneConfig};
use crate::cluster::ClusterSample;
use crate::error::{invalid, Error, Result};
use crate::rng::StreamKey;
use crate::stats::bootstrap_ci;

/// Tip positions in `[-v_floor, inf)`, sorted in decreasing order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TipSet {
    pub z: f64,
    pub v_floor: f64,
    pub tips: Vec<f64>,
}

impl TipSet {
    /// Number of tips at or above `-v`.
    pub fn count_at_least(&self, v: f64) -> usize {
        self.tips.partition_point(|u| *u >= -v)
    }
}

/// Mean number of tips in `[-v, inf)`.
pub fn tip_mean(z: f64, v: f64) -> f64 {
    z * (SQRT_2 * v).exp() / SQRT_2
}

fn poisson_count<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<u64> {
    if mean == 0.0 {
        return Ok(0);
    }
    let law = Poisson::new(mean).map_err(|e| invalid("tip mean", e.to_string()))?;
    Ok(law.sample(rng) as u64)
}

#[inline]
fn tip_position<R: Rng + ?Sized>(v_floor: f64, rng: &mut R) -> f64 {
    // inverse CDF of sqrt2 e^{-sqrt2 (u + v_floor)} on [-v_floor, inf)
    let u: f64 = 1.0 - rng.random::<f64>();
    -v_floor - u.ln() / SQRT_2
}

fn check_z(z: f64) -> Result<()> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(invalid("z", format!("must be finite and > 0, got {z}")));
    }
    Ok(())
}

pub fn sample_tips(z: f64, v_floor: f64, key: StreamKey) -> Result<TipSet> {
    check_z(z)?;
    if !v_floor.is_finite() {
        return Err(invalid("v_floor", "must be finite"));
    }
    let mut rng = key.rng();
    let n = poisson_count(tip_mean(z, v_floor), &mut rng)?;
    let mut tips: Vec<f64> = (0..n).map(|_| tip_position(v_floor, &mut rng)).collect();
    tips.sort_by(|a, b| b.total_cmp(a));
    Ok(TipSet { z, v_floor, tips })
}

/// `E([-v, inf)) = sum_k C^k([-(v + u_k), 0])` over tips `u_k >= -v`, with
/// `clusters[k]` dressing the `k`-th highest tip. Depths between grid
/// points are rounded down.
pub fn assemble_e(tips: &TipSet, clusters: &[ClusterSample], v: f64) -> Result<u64> {
    let n = tips.count_at_least(v);
    if clusters.len() < n {
        return Err(invalid(
            "clusters",
            format!(
                "{n} tips at or above -{v} but only {} clusters",
                clusters.len()
            ),
        ));
    }
    tips.tips[..n]
        .iter()
        .zip(clusters)
        .map(|(u, c)| c.count_floor((v + u).max(0.0)))
        .sum()
}

/// One assembly drawn from a cluster pool, measured at several depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assembly {
    /// `E([-v, inf))` for each requested `v`.
    pub counts: Vec<u64>,
    /// Tips at or above `-v` for each requested `v`.
    pub tips: Vec<u64>,
}

/// Streaming assembly of `E([-v, inf))` at every `v` in `vs` from one
/// realisation: tips in `[-v_floor, inf)` are drawn one at a time and each
/// is dressed with a pool cluster chosen uniformly with replacement.
/// Nothing per tip is stored. Requires `v_floor >= max(vs)`.
pub fn assemble_from_pool(
    z: f64,
    vs: &[f64],
    v_floor: f64,
    pool: &[ClusterSample],
    key: StreamKey,
) -> Result<Assembly> {
    check_z(z)?;
    if pool.is_empty() {
        return Err(invalid("pool", "must not be empty"));
    }
    if vs.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(invalid("v", "depths must be finite and >= 0"));
    }
    if !(vs.iter().all(|v| *v <= v_floor) && v_floor.is_finite()) {
        return Err(invalid(
            "v_floor",
            format!("must be finite and >= every v, got {v_floor}"),
        ));
    }
    let mut rng = key.rng();
    let n = poisson_count(tip_mean(z, v_floor), &mut rng)?;
    let mut counts = vec![0u64; vs.len()];
    let mut tips = vec![0u64; vs.len()];
    for _ in 0..n {
        let u = tip_position(v_floor, &mut rng);
        let c = &pool[rng.random_range(0..pool.len())];
        for (j, &v) in vs.iter().enumerate() {
            if u >= -v {
                counts[j] += c.count_floor(v + u)?;
                tips[j] += 1;
            }
        }
    }
    Ok(Assembly { counts, tips })
}

/// `E / (C* Z v e^{sqrt2 v})`.
pub fn ratio_statistic(e_count: u64, z: f64, cstar_hat: f64, v: f64) -> Result<f64> {
    check_z(z)?;
    if !(cstar_hat > 0.0) || !(v > 0.0) {
        return Err(invalid("ratio", "cstar_hat and v must be > 0"));
    }
    Ok(e_count as f64 / (cstar_hat * z * v * (SQRT_2 * v).exp()))
}

/// `sum_i C_i([-v, 0]) e^{-sqrt2 v}` at one fitting depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CstarAtDepth {
    pub v: f64,
    pub estimate: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Share of the sample mean carried by the top 1% of clusters.
    pub top_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CstarEstimate {
    pub value: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub per_depth: Vec<CstarAtDepth>,
    /// Set when at some depth the top 1% of clusters carry more than half
    /// of the mean.
    pub heavy_tail: bool,
}

impl CstarEstimate {
    /// Whether the per-depth bootstrap intervals share a common point.
    pub fn stable(&self) -> bool {
        let lo = self
            .per_depth
            .iter()
            .map(|d| d.ci_low)
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = self
            .per_depth
            .iter()
            .map(|d| d.ci_high)
            .fold(f64::INFINITY, f64::min);
        lo <= hi
    }
}

pub const MIN_CSTAR_CLUSTERS: usize = 100;
const BOOTSTRAP_RESAMPLES: usize = 2000;
const BOOTSTRAP_LEVEL: f64 = 0.95;

fn top_share(xs: &[f64]) -> f64 {
    let total: f64 = xs.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let k = (xs.len() as f64 * 0.01).ceil() as usize;
    sorted[..k].iter().sum::<f64>() / total
}

/// Average over `v_fit` of the normalised sample means `mean C([-v,0]) e^{-sqrt2 v}`,
/// with percentile bootstrap intervals per depth and for the average.
pub fn estimate_cstar(
    clusters: &[ClusterSample],
    v_fit: &[f64],
    key: StreamKey,
) -> Result<CstarEstimate> {
    if v_fit.is_empty() {
        return Err(invalid("v_fit", "must not be empty"));
    }
    if clusters.len() < MIN_CSTAR_CLUSTERS {
        return Err(invalid(
            "clusters",
            format!("need at least {MIN_CSTAR_CLUSTERS}, got {}", clusters.len()),
        ));
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    let mut per_depth = Vec::with_capacity(v_fit.len());
    let mut columns = Vec::with_capacity(v_fit.len());
    for (j, &v) in v_fit.iter().enumerate() {
        let scale = (-SQRT_2 * v).exp();
        let xs = clusters
            .iter()
            .map(|c| c.count_at(v).map(|n| n as f64 * scale))
            .collect::<Result<Vec<f64>>>()?;
        let (ci_low, ci_high) = bootstrap_ci(
            &xs,
            BOOTSTRAP_RESAMPLES,
            BOOTSTRAP_LEVEL,
            key.child(j as u64),
            mean,
        );
        per_depth.push(CstarAtDepth {
            v,
            estimate: mean(&xs),
            ci_low,
            ci_high,
            top_share: top_share(&xs),
        });
        columns.push(xs);
    }
    // the average over depths is a per-cluster statistic, so resample clusters
    let rows: Vec<f64> = (0..clusters.len())
        .map(|i| columns.iter().map(|c| c[i]).sum::<f64>() / columns.len() as f64)
        .collect();
    let (ci_low, ci_high) = bootstrap_ci(
        &rows,
        BOOTSTRAP_RESAMPLES,
        BOOTSTRAP_LEVEL,
        key.child(v_fit.len() as u64),
        mean,
    );
    let value = mean(&rows);
    if !(value > 0.0) {
        return Err(Error::UndefinedStatistic { v: v_fit[0] });
    }
    let heavy_tail = per_depth.iter().any(|d| d.top_share > 0.5);
    Ok(CstarEstimate {
        value,
        ci_low,
        ci_high,
        per_depth,
        heavy_tail,
    })
}

/// How the intensity `Z` of an assembly is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ZSource {
    Fixed {
        z: f64,
    },
    /// Derivative martingale of an unpruned BBM at time `t`, redrawn until
    /// positive.
    Proxy {
        t: f64,
    },
}

impl std::str::FromStr for ZSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Some(t) = s.strip_prefix("proxy:") {
            let t: f64 = t
                .parse()
                .map_err(|_| invalid("z", format!("bad proxy time in {s:?}")))?;
            if !(t > 0.0) || !t.is_finite() {
                return Err(invalid("z", "proxy time must be > 0"));
            }
            return Ok(ZSource::Proxy { t });
        }
        let z: f64 = s
            .parse()
            .map_err(|_| invalid("z", format!("expected a number or proxy:<t>, got {s:?}")))?;
        check_z(z)?;
        Ok(ZSource::Fixed { z })
    }
}

impl std::fmt::Display for ZSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ZSource::Fixed { z } => write!(f, "{z}"),
            ZSource::Proxy { t } => write!(f, "proxy:{t}"),
        }
    }
}

const MAX_PROXY_DRAWS: u64 = 10_000;

/// Draw `Z` for one assembly.
pub fn draw_z(source: ZSource, key: StreamKey) -> Result<f64> {
    match source {
        ZSource::Fixed { z } => {
            check_z(z)?;
            Ok(z)
        }
        ZSource::Proxy { t } => {
            for i in 0..MAX_PROXY_DRAWS {
                let snap = simulate_bbm(t, &PruneConfig::disabled(), key.child(i))?;
                let z = derivative_martingale(&snap, 1.0);
                if z > 0.0 {
                    return Ok(z);
                }
            }
            Err(Error::RejectionBudgetExhausted {
                rejections: MAX_PROXY_DRAWS,
                s: t,
                y: 0.0,
                timestamp: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{chi_square_gof_discrete, mean_se};
    use statrs::distribution::{DiscreteCDF, Poisson as PoissonLaw};
    use std::f64::consts::FRAC_1_SQRT_2;

    fn cluster(depths: Vec<f64>, counts: Vec<u64>) -> ClusterSample {
        ClusterSample {
            depths,
            counts,
            r_trunc: 1.0,
            timestamps_used: 0,
            skipped_timestamps: 0,
            rejections: 0,
            tail_bound_estimate: 0.0,
            include_tip: true,
            pruned: false,
            events: 0,
        }
    }

    #[test]
    fn tip_mean_at_zero_floor() {
        assert!((tip_mean(1.0, 0.0) - FRAC_1_SQRT_2).abs() < 1e-5);
        let n = 20_000;
        let xs: Vec<f64> = (0..n)
            .map(|i| {
                sample_tips(1.0, 0.0, StreamKey::from_seed(i))
                    .unwrap()
                    .tips
                    .len() as f64
            })
            .collect();
        let (m, se) = mean_se(&xs);
        assert!((m - FRAC_1_SQRT_2).abs() < 3.0 * se, "{m} +- {se}");
    }

    #[test]
    fn tips_are_sorted_and_above_floor() {
        let t = sample_tips(1.0, 3.0, StreamKey::from_seed(7)).unwrap();
        assert!(t.tips.windows(2).all(|w| w[0] >= w[1]));
        assert!(t.tips.iter().all(|u| *u >= -3.0));
        assert!(sample_tips(0.0, 1.0, StreamKey::from_seed(1)).is_err());
    }

    #[test]
    fn tip_counts_are_poisson_below_floor() {
        let n = 3000;
        let sets: Vec<TipSet> = (0..n)
            .map(|i| sample_tips(1.0, 4.0, StreamKey::from_seed(i)).unwrap())
            .collect();
        for v in [1.0, 2.0] {
            let counts: Vec<u64> = sets.iter().map(|t| t.count_at_least(v) as u64).collect();
            let law = PoissonLaw::new(tip_mean(1.0, v)).unwrap();
            let gof = chi_square_gof_discrete(&counts, |k| law.cdf(k), 5.0);
            assert!(gof.p_value > 0.001, "v = {v}: p = {}", gof.p_value);
        }
    }

    #[test]
    fn doubling_z_doubles_the_mean() {
        let n = 4000;
        let mean = |z: f64| {
            let xs: Vec<f64> = (0..n)
                .map(|i| {
                    sample_tips(z, 1.0, StreamKey::from_seed(i))
                        .unwrap()
                        .tips
                        .len() as f64
                })
                .collect();
            mean_se(&xs)
        };
        let (a, sa) = mean(1.0);
        let (b, sb) = mean(2.0);
        assert!((b - 2.0 * a).abs() < 3.0 * (sb * sb + 4.0 * sa * sa).sqrt());
    }

    #[test]
    fn assemble_examples() {
        let depths = vec![0.0, 1.0, 2.0, 3.0];
        let c = cluster(depths.clone(), vec![1, 4, 9, 20]);
        let none = TipSet {
            z: 1.0,
            v_floor: 3.0,
            tips: vec![-2.5],
        };
        assert_eq!(assemble_e(&none, std::slice::from_ref(&c), 2.0).unwrap(), 0);
        let one = TipSet {
            z: 1.0,
            v_floor: 3.0,
            tips: vec![0.0],
        };
        assert_eq!(assemble_e(&one, std::slice::from_ref(&c), 2.0).unwrap(), 9);
        let two = TipSet {
            z: 1.0,
            v_floor: 3.0,
            tips: vec![0.5, -1.0],
        };
        // depths 2.5 -> floor 2.0 and 1.0
        assert_eq!(
            assemble_e(&two, &[c.clone(), c.clone()], 2.0).unwrap(),
            9 + 4
        );
        // additivity over disjoint tip subsets
        let a = TipSet {
            tips: vec![0.5],
            ..two.clone()
        };
        let b = TipSet {
            tips: vec![-1.0],
            ..two.clone()
        };
        assert_eq!(
            assemble_e(&a, std::slice::from_ref(&c), 2.0).unwrap()
                + assemble_e(&b, std::slice::from_ref(&c), 2.0).unwrap(),
            13
        );
        let deep = TipSet {
            tips: vec![1.5],
            ..two
        };
        assert!(matches!(
            assemble_e(&deep, &[c], 2.0),
            Err(Error::DepthCoverage { .. })
        ));
    }

    #[test]
    fn assembly_dominates_tip_count() {
        let depths: Vec<f64> = (0..=16).map(|i| i as f64 * 0.5).collect();
        let counts: Vec<u64> = (0..=16).map(|i| 1 + i as u64).collect();
        let pool = vec![cluster(depths, counts)];
        for i in 0..50 {
            let a =
                assemble_from_pool(1.0, &[1.0, 3.0], 3.5, &pool, StreamKey::from_seed(i)).unwrap();
            assert!(a.counts[0] >= a.tips[0]);
            assert!(a.counts[1] >= a.counts[0]);
            assert!(a.tips[1] >= a.tips[0]);
        }
        assert!(assemble_from_pool(1.0, &[3.0], 2.0, &pool, StreamKey::from_seed(0)).is_err());
    }

    #[test]
    fn ratio_examples() {
        let v: f64 = 5.0;
        let e = (2.0 * 1.5 * v * (SQRT_2 * v).exp()).round() as u64;
        assert!((ratio_statistic(e, 1.5, 2.0, v).unwrap() - 1.0).abs() < 1e-4);
        assert_eq!(ratio_statistic(0, 1.0, 1.0, v).unwrap(), 0.0);
        assert!(ratio_statistic(1, 1.0, 0.0, v).is_err());
    }

    #[test]
    fn cstar_of_exact_clusters() {
        let depths = vec![1.0, 2.0];
        let counts: Vec<u64> = depths
            .iter()
            .map(|v: &f64| (SQRT_2 * v).exp().round() as u64)
            .collect();
        let pool: Vec<ClusterSample> = (0..100)
            .map(|_| cluster(depths.clone(), counts.clone()))
            .collect();
        let est = estimate_cstar(&pool, &depths, StreamKey::from_seed(1)).unwrap();
        assert!((est.value - 1.0).abs() < 0.05);
        assert_eq!(est.ci_low, est.ci_high);
        assert!(!est.heavy_tail);
        assert!(estimate_cstar(&pool[..10], &depths, StreamKey::from_seed(1)).is_err());
    }

    #[test]
    fn heavy_tail_flag() {
        let depths = vec![1.0];
        let mut pool: Vec<ClusterSample> =
            (0..100).map(|_| cluster(depths.clone(), vec![1])).collect();
        pool[0].counts = vec![1000];
        let est = estimate_cstar(&pool, &depths, StreamKey::from_seed(1)).unwrap();
        assert!(est.heavy_tail);
        assert!(est.value > 0.0);
    }

    #[test]
    fn z_source_parsing() {
        assert_eq!("2.5".parse::<ZSource>().unwrap(), ZSource::Fixed { z: 2.5 });
        assert_eq!(
            "proxy:8".parse::<ZSource>().unwrap(),
            ZSource::Proxy { t: 8.0 }
        );
        assert!("-1".parse::<ZSource>().is_err());
        assert!("proxy:x".parse::<ZSource>().is_err());
        let z = draw_z(ZSource::Proxy { t: 3.0 }, StreamKey::from_seed(2)).unwrap();
        assert!(z > 0.0);
        assert_eq!(
            draw_z(ZSource::Proxy { t: 3.0 }, StreamKey::from_seed(2)).unwrap(),
            z
        );
    }
}
