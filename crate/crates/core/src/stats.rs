//! Small statistics toolbox: Gaussian tails, goodness-of-fit tests,
//! empirical quantiles and bootstrap intervals.

use rand::Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::erf::{erf, erfc, erfc_inv};

use crate::rng::StreamKey;

/// Standard normal upper tail `Q(z) = P(N(0,1) > z)`.
pub fn normal_tail(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// `log Q(z)`, accurate far into the upper tail.
pub fn log_normal_tail(z: f64) -> f64 {
    if z < 30.0 {
        normal_tail(z).ln()
    } else {
        // Mills-ratio expansion; relative error below 1e-12 for z >= 30.
        let z2 = z * z;
        let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2);
        -0.5 * z2 - (z * (2.0 * std::f64::consts::PI).sqrt()).ln() + series.ln()
    }
}

/// Inverse of [`normal_tail`] for `p` in (0, 1).
pub fn normal_tail_inv(p: f64) -> f64 {
    std::f64::consts::SQRT_2 * erfc_inv(2.0 * p)
}

/// CDF of the chi distribution with three degrees of freedom (the law of
/// the norm of a standard 3D Gaussian vector).
pub fn chi3_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    erf(x / std::f64::consts::SQRT_2)
        - (2.0 / std::f64::consts::PI).sqrt() * x * (-0.5 * x * x).exp()
}

/// Mean of the chi(3) law, `2 sqrt(2/pi)`.
pub fn chi3_mean() -> f64 {
    2.0 * (2.0 / std::f64::consts::PI).sqrt()
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Empirical quantile with linear interpolation between order statistics.
/// `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    v
}

pub fn quantile(xs: &[f64], q: f64) -> f64 {
    quantile_sorted(&sorted_copy(xs), q)
}

pub fn median(xs: &[f64]) -> f64 {
    quantile(xs, 0.5)
}

pub fn iqr(xs: &[f64]) -> f64 {
    let s = sorted_copy(xs);
    quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25)
}

/// Upper tail probability of the chi-square law.
pub fn chi_square_sf(statistic: f64, df: f64) -> f64 {
    ChiSquared::new(df)
        .map(|d| 1.0 - d.cdf(statistic))
        .unwrap_or(f64::NAN)
}

/// Result of a binned chi-square goodness-of-fit test.
#[derive(Debug, Clone)]
pub struct GofResult {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub bins: usize,
}

/// Chi-square goodness of fit of integer samples against a discrete law
/// given by its CDF `cdf(k) = P(X <= k)`. Bins are built greedily from the
/// left so that each holds at least `min_expected` expected observations;
/// the last bin absorbs the upper tail.
pub fn chi_square_gof_discrete(
    samples: &[u64],
    cdf: impl Fn(u64) -> f64,
    min_expected: f64,
) -> GofResult {
    let n = samples.len() as f64;
    let max_obs = samples.iter().copied().max().unwrap_or(0);
    // Bin boundaries as inclusive upper ends; last bin is open-ended.
    let mut uppers: Vec<u64> = Vec::new();
    let mut prev_cdf = 0.0;
    let mut k = 0u64;
    loop {
        let c = cdf(k);
        if (c - prev_cdf) * n >= min_expected && (1.0 - c) * n >= min_expected {
            uppers.push(k);
            prev_cdf = c;
        }
        if (1.0 - c) * n < min_expected || (k > max_obs && c > 1.0 - 1e-15) {
            break;
        }
        k += 1;
    }
    let bins = uppers.len() + 1;
    let mut observed = vec![0.0f64; bins];
    for &x in samples {
        let idx = uppers.partition_point(|&u| u < x);
        observed[idx] += 1.0;
    }
    let mut statistic = 0.0;
    let mut lower_cdf = 0.0;
    for (i, obs) in observed.iter().enumerate() {
        let upper_cdf = if i < uppers.len() {
            cdf(uppers[i])
        } else {
            1.0
        };
        let expected = (upper_cdf - lower_cdf) * n;
        if expected > 0.0 {
            statistic += (obs - expected).powi(2) / expected;
        }
        lower_cdf = upper_cdf;
    }
    let df = bins.saturating_sub(1).max(1);
    GofResult {
        statistic,
        df,
        p_value: chi_square_sf(statistic, df as f64),
        bins,
    }
}

/// One-sample Kolmogorov-Smirnov statistic against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let sorted = sorted_copy(samples);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic Kolmogorov distribution survival function
/// `P(K > lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic critical value `c(alpha) = sqrt(-ln(alpha/2)/2)` of the
/// Kolmogorov distribution.
pub fn kolmogorov_critical(alpha: f64) -> f64 {
    (-(alpha / 2.0).ln() / 2.0).sqrt()
}

/// Critical value of the one-sample KS statistic at level `alpha`.
pub fn ks_critical_one_sample(n: usize, alpha: f64) -> f64 {
    kolmogorov_critical(alpha) / (n as f64).sqrt()
}

/// Critical value of the two-sample KS statistic at level `alpha`.
pub fn ks_critical_two_sample(n: usize, m: usize, alpha: f64) -> f64 {
    let (n, m) = (n as f64, m as f64);
    kolmogorov_critical(alpha) * ((n + m) / (n * m)).sqrt()
}

/// Percentile bootstrap interval for a statistic of a sample.
pub fn bootstrap_ci(
    xs: &[f64],
    resamples: usize,
    level: f64,
    key: StreamKey,
    stat: impl Fn(&[f64]) -> f64,
) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut rng = key.rng();
    let mut buf = vec![0.0; xs.len()];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = xs[rng.random_range(0..xs.len())];
            }
            stat(&buf)
        })
        .collect();
    stats.sort_by(|a, b| a.total_cmp(b));
    let alpha = (1.0 - level) / 2.0;
    (
        quantile_sorted(&stats, alpha),
        quantile_sorted(&stats, 1.0 - alpha),
    )
}
