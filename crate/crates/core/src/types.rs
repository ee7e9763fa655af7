//! Shared domain types: point measures, particle genealogies, sampled
//! paths, run manifests, and the centering function.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// `3 / (2 sqrt 2)`, the coefficient of the logarithmic correction.
pub const LOG_CORRECTION: f64 = 3.0 / (2.0 * std::f64::consts::SQRT_2);

/// `log(max(t, 1))`.
#[inline]
pub fn log_plus(t: f64) -> f64 {
    t.max(1.0).ln()
}

/// Centering of the maximum, `m_t = sqrt(2) t - 3/(2 sqrt 2) log+ t`.
pub fn m_of_t(t: f64) -> Result<f64> {
    if !(t >= 0.0) || !t.is_finite() {
        return Err(invalid("t", format!("must be finite and >= 0, got {t}")));
    }
    Ok(centering(t))
}

/// Unchecked [`m_of_t`] for hot paths.
#[inline]
pub(crate) fn centering(t: f64) -> f64 {
    std::f64::consts::SQRT_2 * t - LOG_CORRECTION * log_plus(t)
}

/// Atomic measure on the real line. Atoms are kept sorted by position with
/// merged multiplicities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PointMeasure {
    atoms: Vec<(f64, u64)>,
}

impl PointMeasure {
    pub fn new() -> Self {
        Self::default()
    }

    /// Build from unsorted positions, each with multiplicity one.
    pub fn from_positions(mut positions: Vec<f64>) -> Self {
        positions.retain(|x| !x.is_nan());
        positions.sort_by(|a, b| a.total_cmp(b));
        let mut atoms: Vec<(f64, u64)> = Vec::with_capacity(positions.len());
        for x in positions {
            match atoms.last_mut() {
                Some((p, m)) if *p == x => *m += 1,
                _ => atoms.push((x, 1)),
            }
        }
        PointMeasure { atoms }
    }

    /// Build from `(position, multiplicity)` pairs; zero multiplicities are
    /// dropped and repeated positions merged.
    pub fn from_atoms(atoms: impl IntoIterator<Item = (f64, u64)>) -> Self {
        let mut raw: Vec<(f64, u64)> = atoms
            .into_iter()
            .filter(|(x, m)| *m > 0 && !x.is_nan())
            .collect();
        raw.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut merged: Vec<(f64, u64)> = Vec::with_capacity(raw.len());
        for (x, m) in raw {
            match merged.last_mut() {
                Some((p, pm)) if *p == x => *pm += m,
                _ => merged.push((x, m)),
            }
        }
        PointMeasure { atoms: merged }
    }

    pub fn atoms(&self) -> &[(f64, u64)] {
        &self.atoms
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_mass(&self) -> u64 {
        self.atoms.iter().map(|(_, m)| m).sum()
    }

    pub fn max_position(&self) -> Option<f64> {
        self.atoms.last().map(|(x, _)| *x)
    }

    /// Mass of `[lo, hi)`.
    pub fn count(&self, lo: f64, hi: f64) -> u64 {
        let a = self.atoms.partition_point(|(x, _)| *x < lo);
        let b = self.atoms.partition_point(|(x, _)| *x < hi);
        if b <= a {
            return 0;
        }
        self.atoms[a..b].iter().map(|(_, m)| m).sum()
    }

    /// Mass of the closed interval `[lo, hi]`.
    pub fn count_closed(&self, lo: f64, hi: f64) -> u64 {
        let a = self.atoms.partition_point(|(x, _)| *x < lo);
        let b = self.atoms.partition_point(|(x, _)| *x <= hi);
        if b <= a {
            return 0;
        }
        self.atoms[a..b].iter().map(|(_, m)| m).sum()
    }

    /// Mass of `[-v, inf)`.
    pub fn count_at_least(&self, v: f64) -> u64 {
        let a = self.atoms.partition_point(|(x, _)| *x < -v);
        self.atoms[a..].iter().map(|(_, m)| m).sum()
    }

    /// Translate every atom by `delta`.
    pub fn shifted(&self, delta: f64) -> Self {
        PointMeasure {
            atoms: self.atoms.iter().map(|&(x, m)| (x + delta, m)).collect(),
        }
    }

    /// CSV rows `position,multiplicity` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("position,multiplicity\n");
        for (x, m) in &self.atoms {
            let _ = writeln!(out, "{x},{m}");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut atoms = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("position") {
                continue;
            }
            let (x, m) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("bad measure row `{line}`")))?;
            let x: f64 = x
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("position `{x}`: {e}")))?;
            let m: u64 = m
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("multiplicity `{m}`: {e}")))?;
            atoms.push((x, m));
        }
        Ok(Self::from_atoms(atoms))
    }
}

/// Total mass of `mu` on `[-v, inf)`.
pub fn count_at_least(mu: &PointMeasure, v: f64) -> u64 {
    mu.count_at_least(v)
}

/// Genealogy record. A particle lives from `birth_time` until it branches
/// into two children (or until the horizon).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Particle {
    pub id: u64,
    pub parent_id: Option<u64>,
    pub birth_time: f64,
    pub height_at_birth: f64,
}

/// The alive population of one BBM at time `t` together with the ancestor
/// table. Particle ids index into `genealogy` and a parent's id is always
/// smaller than its children's.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PopulationSnapshot {
    pub t: f64,
    pub alive: Vec<(u64, f64)>,
    pub genealogy: Vec<Particle>,
    pub pruned_mass_flag: bool,
}

impl PopulationSnapshot {
    pub fn len(&self) -> usize {
        self.alive.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alive.is_empty()
    }

    pub fn particle(&self, id: u64) -> Result<&Particle> {
        self.genealogy
            .get(id as usize)
            .filter(|p| p.id == id)
            .ok_or(Error::UnknownParticle(id))
    }

    /// Height of an alive particle at time `t`.
    pub fn height(&self, id: u64) -> Result<f64> {
        self.alive
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, h)| *h)
            .ok_or(Error::UnknownParticle(id))
    }

    pub fn max_height(&self) -> Option<f64> {
        self.alive.iter().map(|(_, h)| *h).reduce(f64::max)
    }

    /// Time at which the lineages of `x` and `y` split, i.e. the
    /// generation `|x ^ y|` of their most recent common ancestor.
    pub fn split_time(&self, x: u64, y: u64) -> Result<f64> {
        self.particle(x)?;
        self.particle(y)?;
        if x == y {
            return Ok(self.t);
        }
        let (mut a, mut b) = (x, y);
        let (mut child_a, mut child_b) = (x, y);
        while a != b {
            if a > b {
                child_a = a;
                a = self.parent_of(a)?;
            } else {
                child_b = b;
                b = self.parent_of(b)?;
            }
        }
        // the MRCA branched at the birth time of either child on the paths
        let ca = if child_a == a { child_b } else { child_a };
        Ok(self.particle(ca)?.birth_time)
    }

    fn parent_of(&self, id: u64) -> Result<u64> {
        self.particle(id)?
            .parent_id
            .ok_or(Error::UnknownParticle(id))
    }

    /// The ancestor of `id` alive at time `s` (the particle itself when it
    /// was already born by then).
    pub fn ancestor_at(&self, id: u64, s: f64) -> Result<u64> {
        let mut cur = id;
        loop {
            let p = self.particle(cur)?;
            if p.birth_time <= s {
                return Ok(cur);
            }
            match p.parent_id {
                Some(parent) => cur = parent,
                None => return Ok(cur),
            }
        }
    }

    /// CSV dump, columns `id,parent_id,birth_time,height`. The height
    /// column is empty for particles that are no longer alive.
    pub fn to_csv(&self) -> String {
        let mut heights = vec![None; self.genealogy.len()];
        for &(id, h) in &self.alive {
            heights[id as usize] = Some(h);
        }
        let mut out = String::from("id,parent_id,birth_time,height\n");
        for p in &self.genealogy {
            let parent = p.parent_id.map(|x| x.to_string()).unwrap_or_default();
            let h = heights[p.id as usize]
                .map(|h| h.to_string())
                .unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{}", p.id, parent, p.birth_time, h);
        }
        out
    }
}

/// Genealogical distance `((|x| - |x^y|) + (|y| - |x^y|)) / 2` between two
/// particles alive at the snapshot time.
pub fn genealogical_distance(x: u64, y: u64, snapshot: &PopulationSnapshot) -> Result<f64> {
    for id in [x, y] {
        if !snapshot.alive.iter().any(|(i, _)| *i == id) {
            return Err(Error::UnknownParticle(id));
        }
    }
    let split = snapshot.split_time(x, y)?;
    Ok(snapshot.t - split)
}

/// A function sampled on a strictly increasing time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Path {
    grid: Vec<f64>,
    values: Vec<f64>,
}

impl Path {
    pub fn new(grid: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if grid.len() != values.len() {
            return Err(invalid(
                "values",
                format!("{} values for {} grid points", values.len(), grid.len()),
            ));
        }
        validate_grid(&grid)?;
        Ok(Path { grid, values })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.grid.iter().copied().zip(self.values.iter().copied())
    }

    /// Value at an exact grid point.
    pub fn at(&self, s: f64) -> Option<f64> {
        self.grid
            .binary_search_by(|g| g.total_cmp(&s))
            .ok()
            .map(|i| self.values[i])
    }

    pub fn map_values(&self, f: impl Fn(f64, f64) -> f64) -> Path {
        Path {
            grid: self.grid.clone(),
            values: self.iter().map(|(s, y)| f(s, y)).collect(),
        }
    }
}

pub(crate) fn validate_grid(grid: &[f64]) -> Result<()> {
    if grid.iter().any(|s| !s.is_finite()) {
        return Err(invalid("grid", "non-finite grid point"));
    }
    if let Some(first) = grid.first() {
        if *first < 0.0 {
            return Err(invalid("grid", "grid must start at a time >= 0"));
        }
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("grid", "grid must be strictly increasing"));
    }
    Ok(())
}

/// Provenance of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub replica_count: u64,
    pub parameters: BTreeMap<String, String>,
    pub tool_version: String,
    pub per_replica_digest: Vec<String>,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn centering_examples() {
        assert!((m_of_t(1.0).unwrap() - std::f64::consts::SQRT_2).abs() < 1e-15);
        assert_eq!(m_of_t(0.0).unwrap(), 0.0);
        let e2 = std::f64::consts::E.powi(2);
        let expected = std::f64::consts::SQRT_2 * e2 - 3.0 / std::f64::consts::SQRT_2;
        assert!((m_of_t(e2).unwrap() - expected).abs() < 1e-12);
        assert!((m_of_t(e2).unwrap() - 8.328383).abs() < 1e-6);
        assert!(m_of_t(-0.1).is_err());
        assert!(m_of_t(f64::NAN).is_err());
    }

    #[test]
    fn centering_is_increasing_past_one() {
        let mut prev = m_of_t(1.0).unwrap();
        for i in 1..2000 {
            let t = 1.0 + i as f64 * 0.01;
            let m = m_of_t(t).unwrap();
            assert!(m > prev);
            prev = m;
        }
    }

    #[test]
    fn count_at_least_examples() {
        assert_eq!(count_at_least(&PointMeasure::new(), 3.0), 0);
        let mu = PointMeasure::from_positions(vec![-1.0, -3.0]);
        assert_eq!(count_at_least(&mu, 2.0), 1);
        let mu = PointMeasure::from_positions(vec![0.0, -0.5, -0.5, -5.0]);
        assert_eq!(count_at_least(&mu, 1.0), 3);
        assert_eq!(mu.atoms().len(), 3);
        // closed lower endpoint
        assert_eq!(count_at_least(&mu, 5.0), 4);
        assert_eq!(mu.count_closed(-0.5, 0.0), 3);
        assert_eq!(mu.count(-0.5, 0.0), 2);
    }

    #[test]
    fn measure_csv_round_trip() {
        let mu = PointMeasure::from_positions(vec![0.25, -1.5, -1.5]);
        let back = PointMeasure::from_csv(&mu.to_csv()).unwrap();
        assert_eq!(mu, back);
    }

    fn sibling_snapshot() -> PopulationSnapshot {
        // root branches at 1.5 into ids 1 and 2, snapshot at t = 4
        PopulationSnapshot {
            t: 4.0,
            alive: vec![(1, 5.0), (2, 4.0)],
            genealogy: vec![
                Particle {
                    id: 0,
                    parent_id: None,
                    birth_time: 0.0,
                    height_at_birth: 0.0,
                },
                Particle {
                    id: 1,
                    parent_id: Some(0),
                    birth_time: 1.5,
                    height_at_birth: 0.3,
                },
                Particle {
                    id: 2,
                    parent_id: Some(0),
                    birth_time: 1.5,
                    height_at_birth: 0.3,
                },
            ],
            pruned_mass_flag: false,
        }
    }

    #[test]
    fn genealogical_distance_examples() {
        let snap = sibling_snapshot();
        assert_eq!(genealogical_distance(1, 1, &snap).unwrap(), 0.0);
        assert_eq!(genealogical_distance(1, 2, &snap).unwrap(), 2.5);
        assert_eq!(genealogical_distance(2, 1, &snap).unwrap(), 2.5);
        assert!(matches!(
            genealogical_distance(1, 9, &snap),
            Err(Error::UnknownParticle(9))
        ));
        // the dead root is not alive at t
        assert!(genealogical_distance(0, 1, &snap).is_err());
    }

    #[test]
    fn path_validation() {
        assert!(Path::new(vec![0.0, 1.0], vec![0.0]).is_err());
        assert!(Path::new(vec![0.0, 0.0], vec![0.0, 1.0]).is_err());
        assert!(Path::new(vec![-1.0, 0.0], vec![0.0, 1.0]).is_err());
        let p = Path::new(vec![0.0, 0.5, 2.0], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(p.at(0.5), Some(2.0));
        assert_eq!(p.at(0.7), None);
    }

    #[test]
    fn manifest_json_round_trip() {
        let mut parameters = BTreeMap::new();
        parameters.insert("t".to_string(), "2".to_string());
        let m = RunManifest {
            command: "simulate-bbm".into(),
            seed: 9,
            replica_count: 3,
            parameters,
            tool_version: "0.1.0".into(),
            per_replica_digest: vec!["ab".into()],
            notes: vec![],
        };
        assert_eq!(RunManifest::from_json(&m.to_json().unwrap()).unwrap(), m);
    }

    proptest! {
        #[test]
        fn level_counts_are_monotone(
            xs in proptest::collection::vec(-20.0f64..5.0, 0..60),
            v1 in 0.0f64..25.0,
            dv in 0.0f64..10.0,
        ) {
            let mu = PointMeasure::from_positions(xs);
            prop_assert!(mu.count_at_least(v1) <= mu.count_at_least(v1 + dv));
        }

        #[test]
        fn interval_counts_are_additive(
            xs in proptest::collection::vec(-10.0f64..10.0, 0..60),
            a in -12.0f64..12.0,
            w1 in 0.0f64..5.0,
            w2 in 0.0f64..5.0,
        ) {
            let mu = PointMeasure::from_positions(xs);
            let (b, c) = (a + w1, a + w1 + w2);
            prop_assert_eq!(mu.count(a, b) + mu.count(b, c), mu.count(a, c));
        }
    }
}
