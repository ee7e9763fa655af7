//! Bessel-3 paths as norms of 3D Brownian motion, the `zeta` minimisation
//! sampler, the cluster backbone and envelope diagnostics.

use std::f64::consts::SQRT_2;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{CounterRng, StreamKey};
use crate::types::{log_plus, validate_grid, Path, LOG_CORRECTION};

type Vec3 = [f64; 3];

#[inline]
fn norm(b: &Vec3) -> f64 {
    (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt()
}

#[inline]
fn gaussian3(rng: &mut CounterRng, sd: f64) -> Vec3 {
    [
        sd * rng.sample::<f64, _>(StandardNormal),
        sd * rng.sample::<f64, _>(StandardNormal),
        sd * rng.sample::<f64, _>(StandardNormal),
    ]
}

/// Brownian-bridge infill of a 3D Brownian motion at `s` in `(a, b)`.
#[inline]
fn bridge(rng: &mut CounterRng, a: f64, ba: &Vec3, b: f64, bb: &Vec3, s: f64) -> Vec3 {
    let w = (s - a) / (b - a);
    let sd = ((s - a) * (b - s) / (b - a)).sqrt();
    let z = gaussian3(rng, sd);
    [
        ba[0] + w * (bb[0] - ba[0]) + z[0],
        ba[1] + w * (bb[1] - ba[1]) + z[1],
        ba[2] + w * (bb[2] - ba[2]) + z[2],
    ]
}

/// A 3D Brownian motion sampled on a grid; its norm is a Bessel-3 path.
#[derive(Debug, Clone)]
pub struct Bessel3Path {
    grid: Vec<f64>,
    points: Vec<Vec3>,
}

impl Bessel3Path {
    /// Sample on `grid`, started from `(y0, 0, 0)` at time 0.
    pub fn sample(grid: &[f64], y0: f64, key: StreamKey) -> Result<Self> {
        if !(y0 >= 0.0) || !y0.is_finite() {
            return Err(invalid("y0", format!("must be finite and >= 0, got {y0}")));
        }
        validate_grid(grid)?;
        let mut rng = key.rng();
        let mut prev_s = 0.0;
        let mut prev = [y0, 0.0, 0.0];
        let mut points = Vec::with_capacity(grid.len());
        for &s in grid {
            let z = gaussian3(&mut rng, (s - prev_s).sqrt());
            prev = [prev[0] + z[0], prev[1] + z[1], prev[2] + z[2]];
            prev_s = s;
            points.push(prev);
        }
        Ok(Bessel3Path {
            grid: grid.to_vec(),
            points,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn to_path(&self) -> Path {
        Path::new(self.grid.clone(), self.points.iter().map(norm).collect())
            .expect("grid validated at construction")
    }

    /// Insert the geometric midpoint of every pair of neighbouring grid
    /// points, drawn from the Brownian bridge between them.
    pub fn densify_geometric(&self, key: StreamKey) -> Self {
        let mut rng = key.rng();
        let mut grid = Vec::with_capacity(2 * self.grid.len());
        let mut points = Vec::with_capacity(2 * self.grid.len());
        for i in 0..self.grid.len() {
            if i > 0 {
                let (a, b) = (self.grid[i - 1], self.grid[i]);
                let mid = if a > 0.0 { (a * b).sqrt() } else { 0.5 * b };
                let p = bridge(&mut rng, a, &self.points[i - 1], b, &self.points[i], mid);
                grid.push(mid);
                points.push(p);
            }
            grid.push(self.grid[i]);
            points.push(self.points[i]);
        }
        Bessel3Path { grid, points }
    }
}

/// Sample `Y` at the grid points as the norm of a 3D Brownian motion
/// started at distance `y0` from the origin.
pub fn sample_bessel3(grid: &[f64], y0: f64, key: StreamKey) -> Result<Path> {
    Ok(Bessel3Path::sample(grid, y0, key)?.to_path())
}

/// Search grid for the `zeta` minimisation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaGrid {
    pub s_min: f64,
    pub s_max: f64,
    pub points_per_decade: u32,
    pub refinement_rounds: u32,
}

impl Default for ZetaGrid {
    fn default() -> Self {
        ZetaGrid {
            s_min: 1e-3,
            s_max: 1e3,
            points_per_decade: 64,
            refinement_rounds: 3,
        }
    }
}

impl ZetaGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_min > 0.0) || !self.s_min.is_finite() {
            return Err(invalid("s_min", format!("must be > 0, got {}", self.s_min)));
        }
        if !(self.s_max > self.s_min) || !self.s_max.is_finite() {
            return Err(invalid(
                "s_max",
                format!("must exceed s_min = {}, got {}", self.s_min, self.s_max),
            ));
        }
        if self.points_per_decade < 8 {
            return Err(invalid(
                "points_per_decade",
                format!("must be >= 8, got {}", self.points_per_decade),
            ));
        }
        Ok(())
    }

    /// Geometric progression from `s_min` to `s_max`.
    pub fn points(&self) -> Vec<f64> {
        let decades = (self.s_max / self.s_min).log10();
        let n = ((self.points_per_decade as f64 * decades).round() as usize).max(1);
        let ratio = (self.s_max / self.s_min).powf(1.0 / n as f64);
        let mut pts: Vec<f64> = (0..=n).map(|i| self.s_min * ratio.powi(i as i32)).collect();
        pts[n] = self.s_max;
        pts
    }

    /// The same grid with twice the density.
    pub fn doubled(&self) -> Self {
        ZetaGrid {
            points_per_decade: 2 * self.points_per_decade,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaSample {
    /// Minimum of `sqrt2 Y_s + 1/(2s)` over the refined grid.
    pub value: f64,
    pub argmin_s: f64,
    /// Minimum over the base grid before refinement.
    pub coarse_value: f64,
    pub grid_used: ZetaGrid,
}

#[inline]
fn zeta_objective(s: f64, y: f64) -> f64 {
    SQRT_2 * y + 0.5 / s
}

/// Subdivision depth applied to each interval next to the running argmin
/// in one refinement round (`2^LEVELS` sub-intervals).
const REFINE_LEVELS: u32 = 3;

fn argmin<T>(grid: &[f64], state: &[T], value: &impl Fn(f64, &T) -> f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, (s, x)) in grid.iter().zip(state).enumerate() {
        let v = value(*s, x);
        if v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// Width, in local standard deviations of `sqrt2 Y` over one interval, of
/// the band above the running minimum inside which intervals are refined.
const REFINE_BAND: f64 = 3.0;

/// Minimise `value` over `grid`, then refine `rounds` times. An interval is
/// split geometrically into `2^REFINE_LEVELS` pieces when it lies within
/// two grid steps of the running argmin, or when one of its endpoints is
/// within `REFINE_BAND sqrt(2 ds)` of the running minimum, since a rough
/// path can dip that far between grid points. New points come from
/// `infill(left, right, s)`.
fn refine_minimum<T: Clone>(
    mut grid: Vec<f64>,
    mut state: Vec<T>,
    rounds: u32,
    value: impl Fn(f64, &T) -> f64,
    mut infill: impl FnMut((f64, &T), (f64, &T), f64) -> T,
) -> (f64, f64, f64) {
    let (i0, coarse) = argmin(&grid, &state, &value);
    let mut best = (i0, coarse);
    for _ in 0..rounds {
        let vals: Vec<f64> = grid.iter().zip(&state).map(|(s, x)| value(*s, x)).collect();
        let i = best.0;
        let near = i.saturating_sub(2)..(i + 2).min(grid.len() - 1);
        let mut new_grid = Vec::with_capacity(grid.len() + 64);
        let mut new_state = Vec::with_capacity(grid.len() + 64);
        new_grid.push(grid[0]);
        new_state.push(state[0].clone());
        for j in 0..grid.len() - 1 {
            let (a, b) = (grid[j], grid[j + 1]);
            let band = best.1 + REFINE_BAND * (2.0 * (b - a)).sqrt();
            if !(near.contains(&j) || vals[j].min(vals[j + 1]) <= band) {
                new_grid.push(b);
                new_state.push(state[j + 1].clone());
                continue;
            }
            let pieces = 1usize << REFINE_LEVELS;
            let mut seg_s: Vec<f64> = (0..=pieces)
                .map(|k| a * (b / a).powf(k as f64 / pieces as f64))
                .collect();
            seg_s[pieces] = b;
            let mut seg: Vec<Option<T>> = vec![None; pieces + 1];
            seg[0] = Some(state[j].clone());
            seg[pieces] = Some(state[j + 1].clone());
            let mut stride = pieces;
            while stride > 1 {
                let half = stride / 2;
                let mut k = 0;
                while k < pieces {
                    let (l, r, m) = (k, k + stride, k + half);
                    let x = infill(
                        (seg_s[l], seg[l].as_ref().unwrap()),
                        (seg_s[r], seg[r].as_ref().unwrap()),
                        seg_s[m],
                    );
                    seg[m] = Some(x);
                    k += stride;
                }
                stride = half;
            }
            for k in 1..=pieces {
                new_grid.push(seg_s[k]);
                new_state.push(seg[k].take().unwrap());
            }
        }
        grid = new_grid;
        state = new_state;
        best = argmin(&grid, &state, &value);
    }
    (best.1, grid[best.0], coarse)
}

fn zeta_from_path(path: Bessel3Path, grid: &ZetaGrid, key: StreamKey) -> ZetaSample {
    let mut rng = key.rng();
    let (value, argmin_s, coarse_value) = refine_minimum(
        path.grid,
        path.points,
        grid.refinement_rounds,
        |s, b| zeta_objective(s, norm(b)),
        |(a, ba), (b, bb), s| bridge(&mut rng, a, ba, b, bb, s),
    );
    ZetaSample {
        value,
        argmin_s,
        coarse_value,
        grid_used: *grid,
    }
}

const BASE_PATH: u64 = 0;
const REFINEMENT: u64 = 1;
const DENSIFY: u64 = 2;
const DENSE_REFINEMENT: u64 = 3;

/// One sample of `zeta = inf_s (sqrt2 Y_s + 1/(2s))` for a Bessel-3 process
/// `Y` from 0.
pub fn sample_zeta(grid: &ZetaGrid, key: StreamKey) -> Result<ZetaSample> {
    grid.validate()?;
    let path = Bessel3Path::sample(&grid.points(), 0.0, key.child(BASE_PATH))?;
    Ok(zeta_from_path(path, grid, key.child(REFINEMENT)))
}

/// `zeta` on `grid` and on the doubled grid for the same underlying path.
/// The first component equals [`sample_zeta`] with the same key.
pub fn sample_zeta_coupled(grid: &ZetaGrid, key: StreamKey) -> Result<(ZetaSample, ZetaSample)> {
    grid.validate()?;
    let path = Bessel3Path::sample(&grid.points(), 0.0, key.child(BASE_PATH))?;
    let dense = path.densify_geometric(key.child(DENSIFY));
    let coarse = zeta_from_path(path, grid, key.child(REFINEMENT));
    let fine = zeta_from_path(dense, &grid.doubled(), key.child(DENSE_REFINEMENT));
    Ok((coarse, fine))
}

/// The `zeta` functional of a deterministic path `y(s)`, with the same grid
/// and refinement scheme as [`sample_zeta`].
pub fn zeta_of_function(grid: &ZetaGrid, y: impl Fn(f64) -> f64) -> Result<ZetaSample> {
    grid.validate()?;
    let pts = grid.points();
    let vals: Vec<f64> = pts.iter().map(|&s| y(s)).collect();
    let (value, argmin_s, coarse_value) = refine_minimum(
        pts,
        vals,
        grid.refinement_rounds,
        zeta_objective_ref,
        |_, _, s| y(s),
    );
    Ok(ZetaSample {
        value,
        argmin_s,
        coarse_value,
        grid_used: *grid,
    })
}

fn zeta_objective_ref(s: f64, y: &f64) -> f64 {
    zeta_objective(s, *y)
}

/// Backbone `-Y_s - 3/(2 sqrt2) log+ s` with `Y` a Bessel-3 process from 0.
pub fn backbone(grid: &[f64], key: StreamKey) -> Result<Path> {
    if let Some(&first) = grid.first() {
        if first != 0.0 {
            return Err(invalid(
                "grid",
                format!("backbone grid must start at 0, got {first}"),
            ));
        }
    }
    Ok(backbone_from(&sample_bessel3(grid, 0.0, key)?))
}

/// Backbone values for an already sampled Bessel path.
pub fn backbone_from(y: &Path) -> Path {
    y.map_values(|s, y| -y - LOG_CORRECTION * log_plus(s))
}

/// Result of [`check_envelope`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvelopeReport {
    pub epsilon: f64,
    pub k: f64,
    pub points_checked: usize,
    pub lower_violations: usize,
    pub upper_violations: usize,
    pub first_violation: Option<f64>,
    /// `max |Y_t - Y_s| / |t - s|^{1/2 - eps}` over grid points in `[0, K]`.
    pub holder_constant: f64,
}

impl EnvelopeReport {
    pub fn holds(&self) -> bool {
        self.lower_violations == 0 && self.upper_violations == 0
    }
}

/// Check `s^{1/2-eps} <= Y_s <= 3 sqrt(s log log s)` at grid points `s >= K`
/// (the upper bound only where `log log s > 0`) and measure the Hölder
/// constant of exponent `1/2 - eps` on `[0, K]`.
pub fn check_envelope(path: &Path, epsilon: f64, k: f64) -> Result<EnvelopeReport> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(invalid(
            "epsilon",
            format!("must lie in (0, 1), got {epsilon}"),
        ));
    }
    let last = path.grid().last().copied().unwrap_or(f64::NEG_INFINITY);
    if !(last >= k) {
        return Err(invalid("K", format!("path ends at {last}, before K = {k}")));
    }
    let expo = 0.5 - epsilon;
    let mut report = EnvelopeReport {
        epsilon,
        k,
        points_checked: 0,
        lower_violations: 0,
        upper_violations: 0,
        first_violation: None,
        holder_constant: 0.0,
    };
    for (s, y) in path.iter().filter(|(s, _)| *s >= k) {
        report.points_checked += 1;
        let mut bad = false;
        if y < s.powf(expo) {
            report.lower_violations += 1;
            bad = true;
        }
        let ll = s.ln().ln();
        if ll > 0.0 && y > 3.0 * (s * ll).sqrt() {
            report.upper_violations += 1;
            bad = true;
        }
        if bad && report.first_violation.is_none() {
            report.first_violation = Some(s);
        }
    }
    let head: Vec<(f64, f64)> = path.iter().filter(|(s, _)| *s <= k).collect();
    for i in 0..head.len() {
        for j in i + 1..head.len() {
            let (s, a) = head[i];
            let (t, b) = head[j];
            let c = (b - a).abs() / (t - s).powf(expo);
            report.holder_constant = report.holder_constant.max(c);
        }
    }
    Ok(report)
}

/// Fraction of Bessel-3 paths from 0 that violate the envelope somewhere on
/// `[K, s_max]`, for each candidate `K`. Paths are sampled on a geometric
/// grid with `points_per_decade` points per decade.
pub fn envelope_violation_frequency(
    epsilon: f64,
    k_candidates: &[f64],
    s_max: f64,
    points_per_decade: u32,
    paths: usize,
    key: StreamKey,
) -> Result<Vec<(f64, f64)>> {
    let k_min = k_candidates.iter().copied().fold(f64::INFINITY, f64::min);
    let grid = ZetaGrid {
        s_min: k_min.max(1e-3),
        s_max,
        points_per_decade: points_per_decade.max(8),
        refinement_rounds: 0,
    };
    grid.validate()?;
    let pts = grid.points();
    let mut violations = vec![0usize; k_candidates.len()];
    for p in 0..paths {
        let path = sample_bessel3(&pts, 0.0, key.child(p as u64))?;
        // last violating grid point decides every candidate K at once
        let expo = 0.5 - epsilon;
        let last_bad = path
            .iter()
            .filter(|&(s, y)| {
                let ll = s.ln().ln();
                y < s.powf(expo) || (ll > 0.0 && y > 3.0 * (s * ll).sqrt())
            })
            .map(|(s, _)| s)
            .fold(f64::NEG_INFINITY, f64::max);
        for (i, &k) in k_candidates.iter().enumerate() {
            if last_bad >= k {
                violations[i] += 1;
            }
        }
    }
    Ok(k_candidates
        .iter()
        .zip(violations)
        .map(|(&k, v)| (k, v as f64 / paths as f64))
        .collect())
}
