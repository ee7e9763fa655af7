//! Cluster samples through the spine decomposition: Poisson timestamps
//! along a backbone, with a conditioned BBM decoration hanging off each
//! timestamp. Level-set counts are streamed into a depth histogram, so no
//! atom is ever stored.

use std::f64::consts::SQRT_2;

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma, gamma_ur};

use crate::bbm::{
    level_pruner, Attempt, ConditionedRun, Node, PruneConfig, PruneReference, PruneTable,
};
use crate::bessel::sample_bessel3;
use crate::error::{invalid, Error, Result};
use crate::rng::StreamKey;
use crate::types::{centering, log_plus, LOG_CORRECTION};

/// Intensity of the timestamp process.
pub const TIMESTAMP_RATE: f64 = 2.0;

const TIMESTAMPS: u64 = 0;
const BACKBONE: u64 = 1;
const DECORATIONS: u64 = 2;

/// Matching tolerance when looking up a measured depth.
const DEPTH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestampSet {
    pub points: Vec<f64>,
    pub rate: f64,
    pub r_trunc: f64,
}

/// Homogeneous Poisson process of rate 2 on `[0, r_trunc]`.
pub fn sample_timestamps(r_trunc: f64, key: StreamKey) -> Result<TimestampSet> {
    sample_timestamps_with_rate(r_trunc, TIMESTAMP_RATE, key)
}

/// Poisson process on `[0, r_trunc]` from successive exponential gaps, so
/// that the points for a shorter horizon are a prefix of the longer one.
pub fn sample_timestamps_with_rate(
    r_trunc: f64,
    rate: f64,
    key: StreamKey,
) -> Result<TimestampSet> {
    if !(r_trunc > 0.0) || !r_trunc.is_finite() {
        return Err(invalid(
            "r_trunc",
            format!("must be finite and > 0, got {r_trunc}"),
        ));
    }
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(invalid(
            "rate",
            format!("must be finite and > 0, got {rate}"),
        ));
    }
    let mut rng = key.rng();
    let mut points = Vec::new();
    let mut s = 0.0;
    loop {
        let gap: f64 = rng.sample(Exp1);
        s += gap / rate;
        if s > r_trunc {
            break;
        }
        points.push(s);
    }
    Ok(TimestampSet {
        points,
        rate,
        r_trunc,
    })
}

/// Horizon and a-priori tail bound from [`auto_truncation`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Truncation {
    pub r_trunc: f64,
    pub tail_bound: f64,
}

/// Exponent slack in the stretched-exponential tail bound.
pub const TAIL_EPSILON: f64 = 0.1;

/// `r_trunc = 8 v^{4/3} + 50` together with
/// `sum_{k >= 8} exp(-v^{2/3} k^{1/2 - eps} / 2)`.
pub fn auto_truncation(v: f64) -> Result<Truncation> {
    if !(v > 0.0) || !v.is_finite() {
        return Err(invalid("v", format!("must be finite and > 0, got {v}")));
    }
    Ok(Truncation {
        r_trunc: 8.0 * v.powf(4.0 / 3.0) + 50.0,
        tail_bound: tail_bound(v, 8.0, TAIL_EPSILON),
    })
}

/// `sum_{k >= k0} exp(-a k^p)` with `a = v^{2/3}/2`, `p = 1/2 - eps`. The
/// first terms are summed directly; the rest is bounded by its first term
/// plus the integral `a^{-1/p} Gamma(1/p, a K^p) / p`.
pub fn tail_bound(v: f64, k0: f64, epsilon: f64) -> f64 {
    let a = 0.5 * v.powf(2.0 / 3.0);
    let p = 0.5 - epsilon;
    let f = |k: f64| (-a * k.powf(p)).exp();
    let start = k0.max(1.0).ceil();
    let direct_terms = 10_000.0;
    let mut sum = 0.0;
    let mut k = start;
    while k < start + direct_terms {
        sum += f(k);
        k += 1.0;
    }
    let shape = 1.0 / p;
    let x = a * k.powf(p);
    let integral = a.powf(-shape) * gamma_ur(shape, x) * gamma(shape) / p;
    sum + f(k) + integral
}

/// Level-set counts of one cluster at a grid of depths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSample {
    /// Strictly increasing depths `v >= 0`.
    pub depths: Vec<f64>,
    /// `C([-v, 0])` for each depth.
    pub counts: Vec<u64>,
    pub r_trunc: f64,
    pub timestamps_used: usize,
    /// Timestamps whose decoration could not reach the counting level.
    pub skipped_timestamps: usize,
    pub rejections: u64,
    pub tail_bound_estimate: f64,
    pub include_tip: bool,
    pub pruned: bool,
    /// Particles simulated, including rejected attempts.
    #[serde(default)]
    pub events: u64,
}

impl ClusterSample {
    /// Count at a measured depth.
    pub fn count_at(&self, v: f64) -> Result<u64> {
        let i = self.depths.partition_point(|d| *d < v - DEPTH_TOL);
        match self.depths.get(i) {
            Some(d) if (d - v).abs() <= DEPTH_TOL => Ok(self.counts[i]),
            _ => Err(Error::DepthNotMeasured(v)),
        }
    }

    pub fn max_depth(&self) -> f64 {
        self.depths.last().copied().unwrap_or(f64::NEG_INFINITY)
    }

    /// Count at the deepest measured depth not exceeding `d`, a lower bound
    /// for `C([-d, 0])`.
    pub fn count_floor(&self, d: f64) -> Result<u64> {
        if d > self.max_depth() + DEPTH_TOL {
            return Err(Error::DepthCoverage {
                required: d,
                available: self.max_depth(),
            });
        }
        let i = self.depths.partition_point(|x| *x <= d + DEPTH_TOL);
        Ok(if i == 0 {
            u64::from(self.include_tip)
        } else {
            self.counts[i - 1]
        })
    }

    pub fn depth_counts(&self) -> impl Iterator<Item = (f64, u64)> + '_ {
        self.depths.iter().copied().zip(self.counts.iter().copied())
    }
}

fn validate_depths(depths: &[f64]) -> Result<()> {
    if depths.is_empty() {
        return Err(invalid("v_list", "must not be empty"));
    }
    if depths.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(invalid("v_list", "depths must be finite and >= 0"));
    }
    if depths.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("v_list", "depths must be strictly increasing"));
    }
    Ok(())
}

/// Histogram over the depth grid; bin `j` collects atoms `w` (relative to
/// the tip, `w <= 0`) with `depths[j-1] < -w <= depths[j]`.
#[derive(Debug, Clone)]
struct DepthHistogram {
    depths: Vec<f64>,
    hist: Vec<u64>,
}

impl DepthHistogram {
    fn new(depths: &[f64]) -> Self {
        DepthHistogram {
            depths: depths.to_vec(),
            hist: vec![0; depths.len()],
        }
    }

    #[inline]
    fn add(&mut self, w: f64) {
        let j = self.depths.partition_point(|d| *d < -w);
        if let Some(slot) = self.hist.get_mut(j) {
            *slot += 1;
        }
    }

    fn absorb(&mut self, other: &mut DepthHistogram) {
        for (a, b) in self.hist.iter_mut().zip(other.hist.iter_mut()) {
            *a += *b;
            *b = 0;
        }
    }

    fn clear(&mut self) {
        self.hist.iter_mut().for_each(|x| *x = 0);
    }

    fn cumulative(&self, base: u64) -> Vec<u64> {
        self.hist
            .iter()
            .scan(base, |acc, h| {
                *acc += h;
                Some(*acc)
            })
            .collect()
    }
}

/// Assemble a cluster from explicit ingredients: timestamps `s_i`, backbone
/// values `W_i <= 0` and a decoration source. The decoration at `s_i` is
/// requested with `y = -W_i` and must report atoms relative to its own top,
/// which are then placed at `w` below the tip. Returns the counts per depth.
pub fn compose_cluster(
    depths: &[f64],
    timestamps: &[f64],
    backbone: &[f64],
    include_tip: bool,
    mut decorate: impl FnMut(usize, f64, f64, &mut dyn FnMut(f64)) -> Result<()>,
) -> Result<Vec<u64>> {
    validate_depths(depths)?;
    if timestamps.len() != backbone.len() {
        return Err(invalid(
            "backbone",
            "one backbone value per timestamp required",
        ));
    }
    let mut hist = DepthHistogram::new(depths);
    for (i, (&s, &w)) in timestamps.iter().zip(backbone).enumerate() {
        decorate(i, s, -w, &mut |atom| {
            if atom <= 0.0 {
                hist.add(atom)
            }
        })?;
    }
    Ok(hist.cumulative(u64::from(include_tip)))
}

/// Expected-descendant threshold used by the cluster sampler. Counts at
/// depth 16 move by about 5% between this value and `1e-3` while the work
/// drops sevenfold.
pub const DEFAULT_CLUSTER_THRESHOLD: f64 = 1e-2;

/// Per-pass particle budget of one decoration in the cluster sampler.
pub const DEFAULT_CLUSTER_EVENT_CAP: u64 = 2_000_000_000;

/// Tuning knobs of the cluster sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterOptions {
    pub prune: PruneConfig,
    pub include_tip: bool,
    pub max_rejections: u64,
    pub event_cap: u64,
    pub timestamp_rate: f64,
}

impl Default for ClusterOptions {
    fn default() -> Self {
        ClusterOptions {
            prune: PruneConfig::expected_descendants(f64::MAX, DEFAULT_CLUSTER_THRESHOLD),
            include_tip: true,
            max_rejections: 1000,
            event_cap: DEFAULT_CLUSTER_EVENT_CAP,
            timestamp_rate: TIMESTAMP_RATE,
        }
    }
}

/// Reusable sampler for clusters measured on a fixed depth grid.
#[derive(Debug, Clone)]
pub struct ClusterSampler {
    depths: Vec<f64>,
    r_trunc: f64,
    options: ClusterOptions,
    table: Option<PruneTable>,
    tail_bound: f64,
}

impl ClusterSampler {
    pub fn new(depths: &[f64], r_trunc: f64, options: ClusterOptions) -> Result<Self> {
        validate_depths(depths)?;
        if !(r_trunc > 0.0) || !r_trunc.is_finite() {
            return Err(invalid(
                "r_trunc",
                format!("must be finite and > 0, got {r_trunc}"),
            ));
        }
        let v_max = *depths.last().unwrap();
        let mut prune = options.prune;
        if prune.enabled {
            if let PruneReference::ExpectedDescendants { .. } = prune.relative_to {
                // the level is the deepest counting depth itself
                prune.depth_beta = 1.0;
            }
            prune.validate()?;
        }
        let table = match prune.relative_to {
            PruneReference::ExpectedDescendants { threshold } if prune.enabled => {
                Some(PruneTable::new(threshold, r_trunc))
            }
            _ => None,
        };
        let tail_bound = if v_max > 0.0 {
            let k0 = (r_trunc - 50.0).max(0.0) / v_max.powf(4.0 / 3.0);
            tail_bound(v_max, k0, TAIL_EPSILON)
        } else {
            0.0
        };
        let auto = auto_truncation(v_max.max(f64::MIN_POSITIVE))?.r_trunc;
        if r_trunc < auto {
            log::warn!(
                "r_trunc = {r_trunc} is below the automatic horizon {auto:.1} for v = {v_max}"
            );
        }
        Ok(ClusterSampler {
            depths: depths.to_vec(),
            r_trunc,
            options: ClusterOptions { prune, ..options },
            table,
            tail_bound,
        })
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn r_trunc(&self) -> f64 {
        self.r_trunc
    }

    pub fn options(&self) -> &ClusterOptions {
        &self.options
    }

    pub fn sample(&self, key: StreamKey) -> Result<ClusterSample> {
        let ts = sample_timestamps_with_rate(
            self.r_trunc,
            self.options.timestamp_rate,
            key.child(TIMESTAMPS),
        )?;
        let y = if ts.points.is_empty() {
            Vec::new()
        } else {
            sample_bessel3(&ts.points, 0.0, key.child(BACKBONE))?
                .values()
                .to_vec()
        };
        let v_max = *self.depths.last().unwrap();
        let opts = &self.options;
        let mut total = DepthHistogram::new(&self.depths);
        let mut scratch = DepthHistogram::new(&self.depths);
        let mut stack: Vec<Node> = Vec::new();
        let mut rejections = 0u64;
        let mut skipped = 0usize;
        let mut pruned_any = false;
        let mut work = 0u64;
        let dkey = key.child(DECORATIONS);
        for (i, (&s, &ys)) in ts.points.iter().zip(&y).enumerate() {
            let lift = ys + LOG_CORRECTION * log_plus(s);
            let top = centering(s) + lift;
            let level = top - v_max;
            let pruner = level_pruner(&opts.prune, s, level, self.table.as_ref());
            let run = ConditionedRun {
                s,
                top,
                pruner,
                event_cap: opts.event_cap,
            };
            if run.skips_root() {
                skipped += 1;
                pruned_any = true;
                continue;
            }
            let tkey = dkey.child(i as u64);
            let mut attempt = 0u64;
            let mut budget = opts.max_rejections;
            let mut retried = false;
            loop {
                let mut touched = false;
                let outcome = run.attempt(tkey.child(attempt), &mut stack, &mut |h| {
                    if h >= level {
                        scratch.add(h - top);
                        touched = true;
                    }
                })?;
                match outcome {
                    Attempt::Accepted { pruned, events } => {
                        work += events;
                        pruned_any |= pruned;
                        if touched {
                            total.absorb(&mut scratch);
                        }
                        break;
                    }
                    Attempt::Rejected { events } => {
                        work += events;
                        if touched {
                            scratch.clear();
                        }
                        rejections += 1;
                        attempt += 1;
                        if attempt > budget {
                            if retried {
                                return Err(Error::RejectionBudgetExhausted {
                                    rejections: attempt,
                                    s,
                                    y: lift,
                                    timestamp: Some(i),
                                });
                            }
                            log::warn!(
                                "timestamp {i} (s = {s:.3}, y = {lift:.3}) exhausted {attempt} attempts; retrying with a doubled budget"
                            );
                            retried = true;
                            budget = attempt + 2 * opts.max_rejections;
                        }
                    }
                }
            }
        }
        Ok(ClusterSample {
            depths: self.depths.clone(),
            counts: total.cumulative(u64::from(opts.include_tip)),
            r_trunc: self.r_trunc,
            timestamps_used: ts.points.len(),
            skipped_timestamps: skipped,
            rejections,
            tail_bound_estimate: self.tail_bound,
            include_tip: opts.include_tip,
            pruned: pruned_any,
            events: work,
        })
    }
}

/// One cluster sample at depths `v_list` with timestamps up to `r_trunc`.
pub fn sample_cluster(
    v_list: &[f64],
    r_trunc: f64,
    prune: &PruneConfig,
    key: StreamKey,
) -> Result<ClusterSample> {
    let options = ClusterOptions {
        prune: *prune,
        ..ClusterOptions::default()
    };
    ClusterSampler::new(v_list, r_trunc, options)?.sample(key)
}

/// `(sqrt2 v - log C([-v, 0])) / v^{2/3}`.
pub fn fluctuation_statistic(sample: &ClusterSample, v: f64) -> Result<f64> {
    let count = sample.count_at(v)?;
    fluctuation_of_count(count, v)
}

pub fn fluctuation_of_count(count: u64, v: f64) -> Result<f64> {
    if count == 0 || !(v > 0.0) {
        return Err(Error::UndefinedStatistic { v });
    }
    Ok((SQRT_2 * v - (count as f64).ln()) / v.powf(2.0 / 3.0))
}

/// Fraction of samples with some measured depth `w >= u` where
/// `C([-w, 0]) >= eps w^{-K} e^{sqrt2 w}`.
pub fn tail_event_frequency(samples: &[ClusterSample], u: f64, k: f64, eps: f64) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for sample in samples {
        if u > sample.max_depth() + DEPTH_TOL {
            return Err(Error::DepthCoverage {
                required: u,
                available: sample.max_depth(),
            });
        }
        let hit = sample
            .depth_counts()
            .filter(|(w, _)| *w >= u - DEPTH_TOL && *w > 0.0)
            .any(|(w, c)| c as f64 >= eps * w.powf(-k) * (SQRT_2 * w).exp());
        hits += usize::from(hit);
    }
    Ok(hits as f64 / samples.len() as f64)
}
