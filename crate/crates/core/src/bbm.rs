//! Branching Brownian motion engine.
//!
//! Particles branch into two at rate one and move as independent Brownian
//! motions. Heights are sampled exactly at branch events and at the horizon.
//! Every particle owns a [`StreamKey`]; its lifetime and displacement are the
//! first two draws of that stream and its children use `key.child(1)` and
//! `key.child(2)`. A realization is therefore a pure function of the root key,
//! independent of traversal order and of which subtrees were pruned.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::f64::consts::SQRT_2;

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::StreamKey;
use crate::stats::{log_normal_tail, normal_tail_inv};
use crate::types::{centering, Particle, PointMeasure, PopulationSnapshot};

/// Default cap on particle events per replica.
pub const DEFAULT_EVENT_CAP: u64 = 200_000_000;

/// Default margin added to the deepest counting level for front pruning.
pub const DEFAULT_PRUNE_MARGIN: f64 = 12.0;

/// Default expected-descendant threshold for level-relative pruning.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-7;

/// What a pruned particle is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PruneReference {
    /// Running maximum of heights recorded at branch events so far.
    RunningFront,
    /// The line `sqrt(2) s`.
    LinearSqrt2,
    /// Prune when the expected number of descendants that end at or above
    /// the counting level `top - depth_beta` falls below `threshold`.
    ExpectedDescendants { threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub enabled: bool,
    pub depth_beta: f64,
    pub relative_to: PruneReference,
}

impl PruneConfig {
    pub fn disabled() -> Self {
        PruneConfig {
            enabled: false,
            depth_beta: f64::INFINITY,
            relative_to: PruneReference::RunningFront,
        }
    }

    /// Front pruning suited to counting down to depth `v_max`.
    pub fn for_depth(v_max: f64) -> Self {
        PruneConfig {
            enabled: true,
            depth_beta: v_max + DEFAULT_PRUNE_MARGIN,
            relative_to: PruneReference::RunningFront,
        }
    }

    /// Level-relative pruning with the given expected-descendant threshold.
    pub fn expected_descendants(depth_beta: f64, threshold: f64) -> Self {
        PruneConfig {
            enabled: true,
            depth_beta,
            relative_to: PruneReference::ExpectedDescendants { threshold },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.enabled {
            return Ok(());
        }
        if !(self.depth_beta > 0.0) || !self.depth_beta.is_finite() {
            return Err(invalid(
                "depth_beta",
                format!(
                    "must be finite and > 0 when pruning, got {}",
                    self.depth_beta
                ),
            ));
        }
        if let PruneReference::ExpectedDescendants { threshold } = self.relative_to {
            if !(threshold > 0.0 && threshold < 0.5) {
                return Err(invalid(
                    "threshold",
                    format!("must lie in (0, 0.5), got {threshold}"),
                ));
            }
        }
        Ok(())
    }
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

/// Tabulated pruning margin `g(u) = sqrt(u) Qinv(theta e^{-u})`.
///
/// A particle at height `h` with `u` time left has `e^u Q((L - h)/sqrt u)`
/// expected descendants at or above `L`, which is below `theta` exactly
/// when `h < L - g(u)`. Lookups round `u` up to the next grid point; since
/// `g` is increasing this can only prune less.
#[derive(Debug, Clone)]
pub struct PruneTable {
    theta: f64,
    step: f64,
    g: Vec<f64>,
}

impl PruneTable {
    const STEP: f64 = 1.0 / 64.0;

    pub fn new(theta: f64, u_max: f64) -> Self {
        let n = (u_max.max(1.0) / Self::STEP).ceil() as usize + 2;
        let g = (0..n)
            .map(|i| Self::margin(theta, i as f64 * Self::STEP))
            .collect();
        PruneTable {
            theta,
            step: Self::STEP,
            g,
        }
    }

    pub fn threshold(&self) -> f64 {
        self.theta
    }

    /// Exact margin for remaining time `u`.
    pub fn margin(theta: f64, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        u.sqrt() * normal_tail_inv_log(theta.ln() - u)
    }

    #[inline]
    pub fn lookup(&self, u: f64) -> f64 {
        let idx = (u / self.step).ceil() as usize;
        match self.g.get(idx) {
            Some(g) => *g,
            None => Self::margin(self.theta, u) + 1e-9,
        }
    }
}

/// `Qinv(exp(log_p))`, stable for very small probabilities.
pub(crate) fn normal_tail_inv_log(log_p: f64) -> f64 {
    if log_p > -700.0 {
        return normal_tail_inv(log_p.exp());
    }
    let mut z = (-2.0 * log_p).sqrt();
    for _ in 0..50 {
        // Newton on log Q(z) = log_p; d/dz log Q = -phi(z)/Q(z) ~ -(z + 1/z).
        let f = log_normal_tail(z) - log_p;
        let slope = -(z + 1.0 / z);
        let step = f / slope;
        z -= step;
        if step.abs() < 1e-13 * z {
            break;
        }
    }
    z
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Front {
    Linear,
    Centering,
}

/// Pruning rule specialised to one simulation.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Pruner<'a> {
    None,
    /// Prune when `h < front(tau) + offset - beta`.
    Curve {
        front: Front,
        offset: f64,
        beta: f64,
    },
    /// Prune when `h < level - g(horizon - tau)`.
    Table {
        level: f64,
        horizon: f64,
        table: &'a PruneTable,
    },
}

impl Pruner<'_> {
    #[inline]
    fn prunes(&self, tau: f64, h: f64) -> bool {
        match *self {
            Pruner::None => false,
            Pruner::Curve {
                front,
                offset,
                beta,
            } => {
                let f = match front {
                    Front::Linear => SQRT_2 * tau,
                    Front::Centering => centering(tau),
                };
                h < f + offset - beta
            }
            Pruner::Table {
                level,
                horizon,
                table,
            } => h < level - table.lookup(horizon - tau),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending {
    end: f64,
    id: u64,
}

impl Eq for Pending {}

impl Ord for Pending {
    // Reversed so that BinaryHeap pops the earliest event first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .end
            .total_cmp(&self.end)
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Lifetime and Gaussian displacement drawn from a particle's own stream.
#[inline(always)]
fn particle_draws(key: StreamKey) -> (f64, f64) {
    let mut rng = key.rng();
    let life: f64 = rng.sample(Exp1);
    let z: f64 = rng.sample(StandardNormal);
    (life, z)
}

/// Simulate BBM from a single particle at 0 up to time `t`.
pub fn simulate_bbm(t: f64, prune: &PruneConfig, key: StreamKey) -> Result<PopulationSnapshot> {
    simulate_bbm_capped(t, prune, key, DEFAULT_EVENT_CAP)
}

/// [`simulate_bbm`] with an explicit cap on the number of particles created.
pub fn simulate_bbm_capped(
    t: f64,
    prune: &PruneConfig,
    key: StreamKey,
    event_cap: u64,
) -> Result<PopulationSnapshot> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(invalid("t", format!("must be finite and > 0, got {t}")));
    }
    prune.validate()?;
    let table;
    let pruner = if !prune.enabled {
        Pruner::None
    } else {
        match prune.relative_to {
            // running front handled inline below
            PruneReference::RunningFront => Pruner::None,
            PruneReference::LinearSqrt2 => Pruner::Curve {
                front: Front::Linear,
                offset: 0.0,
                beta: prune.depth_beta,
            },
            PruneReference::ExpectedDescendants { threshold } => {
                table = PruneTable::new(threshold, t);
                Pruner::Table {
                    level: centering(t) - prune.depth_beta,
                    horizon: t,
                    table: &table,
                }
            }
        }
    };
    let running_front = prune.enabled && prune.relative_to == PruneReference::RunningFront;

    let mut genealogy = vec![Particle {
        id: 0,
        parent_id: None,
        birth_time: 0.0,
        height_at_birth: 0.0,
    }];
    // per-particle (key, end height), indexed by id
    let mut state: Vec<(StreamKey, f64)> = Vec::new();
    let mut heap = BinaryHeap::new();
    let mut alive = Vec::new();
    let mut front = 0.0f64;
    let mut pruned = false;

    let schedule = |id: u64,
                    key: StreamKey,
                    birth: f64,
                    h0: f64,
                    state: &mut Vec<(StreamKey, f64)>,
                    heap: &mut BinaryHeap<Pending>| {
        let (life, z) = particle_draws(key);
        let end = (birth + life).min(t);
        let h = h0 + (end - birth).sqrt() * z;
        debug_assert_eq!(state.len() as u64, id);
        state.push((key, h));
        heap.push(Pending { end, id });
    };
    schedule(0, key, 0.0, 0.0, &mut state, &mut heap);

    while let Some(Pending { end, id }) = heap.pop() {
        let (pkey, h) = state[id as usize];
        if end >= t {
            alive.push((id, h));
            continue;
        }
        if running_front {
            front = front.max(h);
            if h < front - prune.depth_beta {
                pruned = true;
                continue;
            }
        } else if pruner.prunes(end, h) {
            pruned = true;
            continue;
        }
        for label in 1..=2u64 {
            let cid = genealogy.len() as u64;
            if cid >= event_cap {
                return Err(Error::PopulationCap {
                    events: cid + 1,
                    cap: event_cap,
                });
            }
            genealogy.push(Particle {
                id: cid,
                parent_id: Some(id),
                birth_time: end,
                height_at_birth: h,
            });
            schedule(cid, pkey.child(label), end, h, &mut state, &mut heap);
        }
    }
    alive.sort_by_key(|(id, _)| *id);
    Ok(PopulationSnapshot {
        t,
        alive,
        genealogy,
        pruned_mass_flag: pruned,
    })
}

/// `C_diamond * sum (sqrt2 t - h) exp(sqrt2 (h - sqrt2 t))` over alive particles.
pub fn derivative_martingale(snapshot: &PopulationSnapshot, c_diamond: f64) -> f64 {
    if snapshot.pruned_mass_flag {
        log::warn!("derivative martingale evaluated on a pruned population; the value is biased");
    }
    let lead = SQRT_2 * snapshot.t;
    c_diamond
        * snapshot
            .alive
            .iter()
            .map(|&(_, h)| (lead - h) * (SQRT_2 * (h - lead)).exp())
            .sum::<f64>()
}

/// Heights centred by `m_t`.
pub fn extremal_process(snapshot: &PopulationSnapshot) -> PointMeasure {
    let m = centering(snapshot.t);
    PointMeasure::from_positions(snapshot.alive.iter().map(|&(_, h)| h - m).collect())
}

/// The `r`-local maxima of the population and their clusters of relative
/// heights. `r` defaults to `t / 2`.
pub fn local_maxima(
    snapshot: &PopulationSnapshot,
    r: Option<f64>,
) -> Result<Vec<(u64, PointMeasure)>> {
    let t = snapshot.t;
    let r = r.unwrap_or(t / 2.0);
    if !(r > 0.0 && r < t) {
        return Err(invalid("r", format!("must lie in (0, t = {t}), got {r}")));
    }
    // Particles within genealogical distance < r share their ancestor alive
    // at time t - r, so the r-balls are exactly these ancestral classes.
    let cut = t - r;
    let mut classes: HashMap<u64, Vec<(u64, f64)>> = HashMap::new();
    let mut order = Vec::new();
    for &(id, h) in &snapshot.alive {
        let anc = snapshot.ancestor_at(id, cut)?;
        let class = classes.entry(anc).or_insert_with(|| {
            order.push(anc);
            Vec::new()
        });
        class.push((id, h));
    }
    let mut out = Vec::new();
    for anc in order {
        let class = &classes[&anc];
        let top = class
            .iter()
            .map(|(_, h)| *h)
            .fold(f64::NEG_INFINITY, f64::max);
        for &(id, h) in class {
            if h >= top {
                let cluster =
                    PointMeasure::from_positions(class.iter().map(|(_, hy)| hy - h).collect());
                out.push((id, cluster));
            }
        }
    }
    out.sort_by_key(|(id, _)| *id);
    Ok(out)
}

/// A conditioned decoration: the extremal process at time `s` conditioned
/// to have no atom above `y`, shifted down by `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecorationSample {
    pub measure: PointMeasure,
    pub s: f64,
    pub y: f64,
    pub rejections: u64,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Node {
    key: StreamKey,
    tau: f64,
    h: f64,
}

/// Depth-first simulation of a BBM up to `s` that is rejected as soon as a
/// particle ends above `top`.
pub(crate) struct ConditionedRun<'a> {
    pub s: f64,
    pub top: f64,
    pub pruner: Pruner<'a>,
    pub event_cap: u64,
}

/// Outcome of a single depth-first pass.
enum Pass {
    Done { pruned: bool, events: u64 },
    Exceeded { events: u64 },
}

pub(crate) enum Attempt {
    Accepted { pruned: bool, events: u64 },
    Rejected { events: u64 },
}

impl ConditionedRun<'_> {
    /// Whether the root itself is pruned, i.e. no descendant can matter.
    pub fn skips_root(&self) -> bool {
        self.pruner.prunes(0.0, 0.0)
    }

    /// Run one attempt, reporting accepted leaf heights to `leaf`. Leaves
    /// of a rejected attempt may already have been reported.
    ///
    /// With a tabulated pruner the attempt first runs a screening pass
    /// anchored at `top`. It explores a subset of the nodes of the main
    /// pass with the same draws, so an exceedance it finds is one the main
    /// pass would also find; it only makes rejections cheaper.
    pub fn attempt(
        &self,
        key: StreamKey,
        stack: &mut Vec<Node>,
        leaf: &mut impl FnMut(f64),
    ) -> Result<Attempt> {
        if self.pruner.prunes(0.0, 0.0) {
            return Ok(Attempt::Accepted {
                pruned: true,
                events: 0,
            });
        }
        let mut spent = 0;
        if let Pruner::Table {
            level,
            horizon,
            table,
        } = self.pruner
        {
            if level < self.top {
                let screen = Pruner::Table {
                    level: self.top,
                    horizon,
                    table,
                };
                match self.pass(key, screen, self.event_cap, stack, &mut |_| {})? {
                    Pass::Exceeded { events } => return Ok(Attempt::Rejected { events }),
                    Pass::Done { events, .. } => spent = events,
                }
            }
        }
        let cap = self.event_cap.saturating_sub(spent);
        Ok(match self.pass(key, self.pruner, cap, stack, leaf)? {
            Pass::Done { pruned, events } => Attempt::Accepted {
                pruned,
                events: events + spent,
            },
            Pass::Exceeded { events } => Attempt::Rejected {
                events: events + spent,
            },
        })
    }

    fn pass(
        &self,
        key: StreamKey,
        pruner: Pruner<'_>,
        cap: u64,
        stack: &mut Vec<Node>,
        leaf: &mut impl FnMut(f64),
    ) -> Result<Pass> {
        stack.clear();
        stack.push(Node {
            key,
            tau: 0.0,
            h: 0.0,
        });
        let mut events = 0u64;
        let mut pruned = false;
        while let Some(n) = stack.pop() {
            events += 1;
            if events > cap {
                return Err(Error::PopulationCap {
                    events,
                    cap: self.event_cap,
                });
            }
            let (life, z) = particle_draws(n.key);
            let end = n.tau + life;
            if end >= self.s {
                let h = n.h + (self.s - n.tau).sqrt() * z;
                if h > self.top {
                    return Ok(Pass::Exceeded { events });
                }
                leaf(h);
                continue;
            }
            let h = n.h + life.sqrt() * z;
            if pruner.prunes(end, h) {
                pruned = true;
                continue;
            }
            stack.push(Node {
                key: n.key.child(2),
                tau: end,
                h,
            });
            stack.push(Node {
                key: n.key.child(1),
                tau: end,
                h,
            });
        }
        Ok(Pass::Done { pruned, events })
    }
}

pub(crate) fn decoration_pruner<'a>(
    prune: &PruneConfig,
    s: f64,
    top: f64,
    table: Option<&'a PruneTable>,
) -> Pruner<'a> {
    if !prune.enabled {
        return Pruner::None;
    }
    match prune.relative_to {
        // depth-first traversal has no running front; the centring curve
        // plays its role
        PruneReference::RunningFront => Pruner::Curve {
            front: Front::Centering,
            offset: 0.0,
            beta: prune.depth_beta,
        },
        PruneReference::LinearSqrt2 => Pruner::Curve {
            front: Front::Linear,
            offset: 0.0,
            beta: prune.depth_beta,
        },
        PruneReference::ExpectedDescendants { .. } => Pruner::Table {
            level: top - prune.depth_beta,
            horizon: s,
            table: table.expect("table built by caller"),
        },
    }
}

/// Pruner for the cluster sampler: every reference is re-anchored to the
/// counting level `level` at the horizon `s`.
pub(crate) fn level_pruner<'a>(
    prune: &PruneConfig,
    s: f64,
    level: f64,
    table: Option<&'a PruneTable>,
) -> Pruner<'a> {
    if !prune.enabled {
        return Pruner::None;
    }
    match prune.relative_to {
        PruneReference::RunningFront | PruneReference::LinearSqrt2 => Pruner::Curve {
            front: Front::Linear,
            offset: level - SQRT_2 * s,
            beta: prune.depth_beta,
        },
        PruneReference::ExpectedDescendants { .. } => Pruner::Table {
            level,
            horizon: s,
            table: table.expect("table built by caller"),
        },
    }
}

/// Rejection-sample `E_s(. + y)` conditioned on `E_s((y, inf)) = 0`, i.e. a
/// BBM run to time `s` whose centred maximum is at most `y`, shifted so
/// that all atoms lie in `(-inf, 0]`.
pub fn sample_decoration(
    s: f64,
    y: f64,
    prune: &PruneConfig,
    key: StreamKey,
    max_rejections: u64,
) -> Result<DecorationSample> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(invalid("s", format!("must be finite and > 0, got {s}")));
    }
    if !(y >= 0.0) || !y.is_finite() {
        return Err(invalid("y", format!("must be finite and >= 0, got {y}")));
    }
    prune.validate()?;
    let top = centering(s) + y;
    let table = match prune.relative_to {
        PruneReference::ExpectedDescendants { threshold } if prune.enabled => {
            Some(PruneTable::new(threshold, s))
        }
        _ => None,
    };
    let run = ConditionedRun {
        s,
        top,
        pruner: decoration_pruner(prune, s, top, table.as_ref()),
        event_cap: DEFAULT_EVENT_CAP,
    };
    let mut stack = Vec::new();
    let mut atoms = Vec::new();
    for attempt in 0..=max_rejections {
        atoms.clear();
        let outcome = run.attempt(key.child(attempt), &mut stack, &mut |h| atoms.push(h - top))?;
        if let Attempt::Accepted { .. } = outcome {
            return Ok(DecorationSample {
                measure: PointMeasure::from_positions(std::mem::take(&mut atoms)),
                s,
                y,
                rejections: attempt,
            });
        }
    }
    Err(Error::RejectionBudgetExhausted {
        rejections: max_rejections + 1,
        s,
        y,
        timestamp: None,
    })
}

/// Level-set counts of one conditioned decoration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecorationCounts {
    pub depths: Vec<f64>,
    /// Number of atoms in `[-v, 0]` for each depth `v`.
    pub counts: Vec<u64>,
    pub rejections: u64,
    pub events: u64,
    pub pruned: bool,
}

/// Streaming version of [`sample_decoration`]: only the counts of atoms in
/// `[-v, 0]` for each `v` in `depths` are kept. Pruning is anchored at the
/// deepest counting level.
pub fn count_decoration(
    s: f64,
    y: f64,
    depths: &[f64],
    prune: &PruneConfig,
    key: StreamKey,
    max_rejections: u64,
) -> Result<DecorationCounts> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(invalid("s", format!("must be finite and > 0, got {s}")));
    }
    if !(y >= 0.0) || !y.is_finite() {
        return Err(invalid("y", format!("must be finite and >= 0, got {y}")));
    }
    if depths.is_empty() || depths.windows(2).any(|w| w[1] <= w[0]) || depths[0] < 0.0 {
        return Err(invalid(
            "depths",
            "must be non-empty, >= 0 and strictly increasing",
        ));
    }
    let v_max = *depths.last().unwrap();
    let top = centering(s) + y;
    let level = top - v_max;
    let mut prune = *prune;
    let table = match prune.relative_to {
        PruneReference::ExpectedDescendants { threshold } if prune.enabled => {
            prune.depth_beta = 1.0;
            Some(PruneTable::new(threshold, s))
        }
        _ => None,
    };
    prune.validate()?;
    let run = ConditionedRun {
        s,
        top,
        pruner: level_pruner(&prune, s, level, table.as_ref()),
        event_cap: DEFAULT_EVENT_CAP,
    };
    let mut stack = Vec::new();
    let mut hist = vec![0u64; depths.len()];
    let mut events = 0;
    for attempt in 0..=max_rejections {
        hist.iter_mut().for_each(|x| *x = 0);
        let outcome = run.attempt(key.child(attempt), &mut stack, &mut |h| {
            if h >= level {
                let j = depths.partition_point(|d| *d < top - h);
                hist[j] += 1;
            }
        })?;
        match outcome {
            Attempt::Accepted { pruned, events: e } => {
                let counts = hist
                    .iter()
                    .scan(0u64, |acc, x| {
                        *acc += x;
                        Some(*acc)
                    })
                    .collect();
                return Ok(DecorationCounts {
                    depths: depths.to_vec(),
                    counts,
                    rejections: attempt,
                    events: events + e,
                    pruned,
                });
            }
            Attempt::Rejected { events: e } => events += e,
        }
    }
    Err(Error::RejectionBudgetExhausted {
        rejections: max_rejections + 1,
        s,
        y,
        timestamp: None,
    })
}
