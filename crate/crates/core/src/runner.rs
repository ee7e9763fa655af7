//! Experiment orchestration: configuration, deterministic replica
//! scheduling, CSV and manifest output.
//!
//! Every command takes a flat map of parameters. Defaults are filled in
//! first, then a `key = value` file, then explicit overrides; the resolved
//! map is what lands in the manifest, so a manifest alone is enough to
//! replay a run. Replica `i` always draws from `StreamKey::replica(seed, i)`
//! and results are folded in replica order, so the worker count only
//! changes wall-clock time.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bbm::{derivative_martingale, simulate_bbm_capped, PruneConfig, PruneReference};
use crate::bessel::{sample_zeta, ZetaGrid};
use crate::cluster::{
    auto_truncation, fluctuation_of_count, ClusterOptions, ClusterSample, ClusterSampler,
};
use crate::error::{invalid, Error, Result};
use crate::limit::{assemble_from_pool, draw_z, estimate_cstar, ratio_statistic, ZSource};
use crate::rng::StreamKey;
use crate::stats::{iqr, median, quantile};
use crate::types::{centering, RunManifest};
use crate::validators::{ks_two_sample, validation_suite, SuiteSize, TestReport};

/// First line of every CSV written by the runner.
pub const SCHEMA_LINE: &str = "# schema=1";

pub const ENV_WORKERS: &str = "BBM_WORKERS";
pub const ENV_OUTPUT_ROOT: &str = "BBM_OUTPUT_ROOT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    SimulateBbm,
    SampleZeta,
    SampleCluster,
    Theorem1,
    Theorem2,
    Validate,
    Report,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::SimulateBbm,
        Command::SampleZeta,
        Command::SampleCluster,
        Command::Theorem1,
        Command::Theorem2,
        Command::Validate,
        Command::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::SimulateBbm => "simulate-bbm",
            Command::SampleZeta => "sample-zeta",
            Command::SampleCluster => "sample-cluster",
            Command::Theorem1 => "theorem1",
            Command::Theorem2 => "theorem2",
            Command::Validate => "validate",
            Command::Report => "report",
        }
    }

    /// Command-specific parameters with their defaults.
    pub fn defaults(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Command::SimulateBbm => &[("t", "4"), ("prune", "off"), ("event-cap", "200000000")],
            Command::SampleZeta => &[
                ("s-min", "0.001"),
                ("s-max", "1000"),
                ("points-per-decade", "64"),
                ("rounds", "3"),
            ],
            Command::SampleCluster => &[
                ("vlist", "4,8"),
                ("rtrunc", "auto"),
                ("depth-step", "0"),
                ("theta", "0.01"),
                ("include-tip", "true"),
                ("max-rejections", "1000"),
                ("event-cap", "2000000000"),
            ],
            Command::Theorem1 => &[
                ("v", "6,12"),
                ("vfloor", "auto"),
                ("assemblies", "200"),
                ("cluster-pool", ""),
                ("z", "proxy:8"),
                ("vfit", "8,10"),
            ],
            Command::Theorem2 => &[
                ("vlist", "8,12,16"),
                ("rtrunc", "auto"),
                ("theta", "0.01"),
                ("include-tip", "true"),
                ("max-rejections", "1000"),
                ("event-cap", "2000000000"),
                ("zeta-replicas", "auto"),
                ("cluster-pool", ""),
            ],
            Command::Validate => &[("size", "quick")],
            Command::Report => &[("input", ""), ("check", "false")],
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| invalid("command", format!("unknown command {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub command: Command,
    pub parameters: BTreeMap<String, String>,
    pub seed: u64,
    pub replicas: u64,
    /// 0 means one worker per available core.
    pub workers: usize,
    pub out_dir: PathBuf,
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Parse(format!("line {}: expected key = value, got {raw:?}", n + 1))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse(format!("line {}: empty key", n + 1)));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| invalid(key, format!("cannot parse {value:?}")))
}

fn parse_f64_list(key: &str, value: &str) -> Result<Vec<f64>> {
    let xs = value
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value::<f64>(key, s))
        .collect::<Result<Vec<f64>>>()?;
    if xs.is_empty() {
        return Err(invalid(key, "list must not be empty"));
    }
    Ok(xs)
}

fn parse_count(key: &str, value: &str) -> Result<u64> {
    // accepts 2e9 as well as 2000000000
    let x: f64 = parse_value(key, value)?;
    if !(x >= 0.0) || x.fract() != 0.0 || x > u64::MAX as f64 {
        return Err(invalid(
            key,
            format!("expected a non-negative integer, got {value:?}"),
        ));
    }
    Ok(x as u64)
}

impl ExperimentConfig {
    /// Configuration with every default filled in.
    pub fn new(command: Command) -> Self {
        let parameters = command
            .defaults()
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        ExperimentConfig {
            command,
            parameters,
            seed: 0,
            replicas: 100,
            workers: 0,
            out_dir: PathBuf::from(format!("runs/{}", command.name())),
        }
    }

    /// Set one parameter by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "replicas" => self.replicas = parse_count(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            _ if self.parameters.contains_key(key) => {
                self.parameters.insert(key.to_string(), value.to_string());
            }
            _ => {
                return Err(invalid(
                    key,
                    format!("not a parameter of `{}`", self.command),
                ))
            }
        }
        Ok(())
    }

    /// Apply a flat `key = value` file.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            if k == "command" {
                let c: Command = v.parse()?;
                if c != self.command {
                    return Err(invalid(
                        "command",
                        format!("file is for `{c}`, running `{}`", self.command),
                    ));
                }
                continue;
            }
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Worker count from the environment.
    pub fn apply_env_workers(&mut self) -> Result<()> {
        if let Ok(w) = std::env::var(ENV_WORKERS) {
            self.workers = parse_value(ENV_WORKERS, &w)?;
        }
        Ok(())
    }

    /// Resolve a relative output directory against the environment root.
    pub fn apply_env_output_root(&mut self) {
        if let Ok(root) = std::env::var(ENV_OUTPUT_ROOT) {
            if self.out_dir.is_relative() {
                self.out_dir = Path::new(&root).join(&self.out_dir);
            }
        }
    }

    /// Rebuild a configuration from a manifest.
    pub fn from_manifest(manifest: &RunManifest) -> Result<Self> {
        let mut cfg = ExperimentConfig::new(manifest.command.parse()?);
        cfg.seed = manifest.seed;
        cfg.replicas = manifest.replica_count;
        for (k, v) in &manifest.parameters {
            if k == "seed" || k == "replicas" {
                continue;
            }
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let v = self
            .parameters
            .get(key)
            .ok_or_else(|| invalid(key, "missing parameter"))?;
        parse_value(key, v)
    }

    fn raw(&self, key: &str) -> &str {
        self.parameters.get(key).map(String::as_str).unwrap_or("")
    }

    fn list(&self, key: &str) -> Result<Vec<f64>> {
        parse_f64_list(key, self.raw(key))
    }

    fn count(&self, key: &str) -> Result<u64> {
        parse_count(key, self.raw(key))
    }

    /// Everything recorded in the manifest, including global keys.
    pub fn resolved_parameters(&self) -> BTreeMap<String, String> {
        let mut p = self.parameters.clone();
        p.insert("seed".into(), self.seed.to_string());
        p.insert("replicas".into(), self.replicas.to_string());
        p.insert("workers".into(), self.workers.to_string());
        p.insert("out".into(), self.out_dir.display().to_string());
        p
    }

    /// Check every parameter of the command, with field-level messages.
    pub fn validate(&self) -> Result<()> {
        let needs_replicas = !matches!(self.command, Command::Validate | Command::Report);
        if needs_replicas && self.replicas == 0 {
            return Err(invalid("replicas", "must be at least 1"));
        }
        match self.command {
            Command::SimulateBbm => {
                let t: f64 = self.get("t")?;
                if !(t >= 0.0) || !t.is_finite() {
                    return Err(invalid("t", "must be finite and >= 0"));
                }
                parse_prune(self.raw("prune"))?;
                self.count("event-cap")?;
            }
            Command::SampleZeta => {
                self.zeta_grid()?;
            }
            Command::SampleCluster | Command::Theorem2 => {
                self.cluster_setup()?;
                if self.command == Command::Theorem2 && self.raw("zeta-replicas") != "auto" {
                    self.count("zeta-replicas")?;
                }
            }
            Command::Theorem1 => {
                let vs = self.list("v")?;
                check_increasing("v", &vs)?;
                let floor = self.vfloor(&vs)?;
                if floor < *vs.last().unwrap() {
                    return Err(invalid(
                        "vfloor",
                        format!("must be >= max v = {}", vs.last().unwrap()),
                    ));
                }
                if self.count("assemblies")? == 0 {
                    return Err(invalid("assemblies", "must be at least 1"));
                }
                if self.raw("cluster-pool").is_empty() {
                    return Err(invalid(
                        "cluster-pool",
                        "path to a cluster pool is required",
                    ));
                }
                self.raw("z").parse::<ZSource>()?;
                check_increasing("vfit", &self.list("vfit")?)?;
            }
            Command::Validate => match self.raw("size") {
                "quick" | "full" => {}
                other => {
                    return Err(invalid(
                        "size",
                        format!("expected quick or full, got {other:?}"),
                    ))
                }
            },
            Command::Report => {
                if self.raw("input").is_empty() {
                    return Err(invalid("input", "directory of a theorem2 run is required"));
                }
                self.get::<bool>("check")?;
            }
        }
        Ok(())
    }

    fn zeta_grid(&self) -> Result<ZetaGrid> {
        let grid = ZetaGrid {
            s_min: self.get("s-min")?,
            s_max: self.get("s-max")?,
            points_per_decade: self.get("points-per-decade")?,
            refinement_rounds: self.get("rounds")?,
        };
        grid.validate()?;
        Ok(grid)
    }

    fn vfloor(&self, vs: &[f64]) -> Result<f64> {
        match self.raw("vfloor") {
            "auto" => Ok(*vs.last().unwrap()),
            s => parse_value("vfloor", s),
        }
    }

    /// Depth grid, horizon and options of the cluster sampler.
    fn cluster_setup(&self) -> Result<(Vec<f64>, Vec<f64>, f64, ClusterOptions)> {
        let vlist = self.list("vlist")?;
        check_increasing("vlist", &vlist)?;
        if vlist[0] <= 0.0 {
            return Err(invalid("vlist", "depths must be > 0"));
        }
        let v_max = *vlist.last().unwrap();
        let step: f64 = if self.parameters.contains_key("depth-step") {
            self.get("depth-step")?
        } else {
            0.0
        };
        if !(step >= 0.0) {
            return Err(invalid("depth-step", "must be >= 0"));
        }
        let depths = depth_grid(&vlist, step);
        let r_trunc = match self.raw("rtrunc") {
            "auto" => auto_truncation(v_max)?.r_trunc,
            s => {
                let r: f64 = parse_value("rtrunc", s)?;
                let auto = auto_truncation(v_max)?.r_trunc;
                if !(r >= auto) {
                    return Err(invalid(
                        "rtrunc",
                        format!("must be >= auto_truncation({v_max}) = {auto:.3}, got {r}"),
                    ));
                }
                r
            }
        };
        let theta: f64 = self.get("theta")?;
        let prune = PruneConfig::expected_descendants(f64::MAX, theta);
        prune.validate()?;
        let opts = ClusterOptions {
            prune,
            include_tip: self.get("include-tip")?,
            max_rejections: self.count("max-rejections")?,
            event_cap: self.count("event-cap")?,
            ..ClusterOptions::default()
        };
        Ok((vlist, depths, r_trunc, opts))
    }
}

fn check_increasing(key: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|x| !x.is_finite()) || xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid(key, "must be finite and strictly increasing"));
    }
    Ok(())
}

/// `vlist` merged with the grid `step, 2 step, ...` up to its maximum.
pub fn depth_grid(vlist: &[f64], step: f64) -> Vec<f64> {
    let mut d = vlist.to_vec();
    let v_max = vlist.last().copied().unwrap_or(0.0);
    if step > 0.0 {
        let n = (v_max / step).floor() as usize;
        d.extend((0..=n).map(|i| i as f64 * step));
    }
    d.sort_by(|a, b| a.total_cmp(b));
    d.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    d
}

/// `off`, `front:<beta>`, `linear:<beta>` or `ed:<theta>:<beta>`.
pub fn parse_prune(s: &str) -> Result<PruneConfig> {
    let parts: Vec<&str> = s.trim().split(':').collect();
    let cfg = match parts.as_slice() {
        ["off"] => PruneConfig::disabled(),
        ["front", beta] => PruneConfig {
            enabled: true,
            depth_beta: parse_value("prune", beta)?,
            relative_to: PruneReference::RunningFront,
        },
        ["linear", beta] => PruneConfig {
            enabled: true,
            depth_beta: parse_value("prune", beta)?,
            relative_to: PruneReference::LinearSqrt2,
        },
        ["ed", theta, beta] => PruneConfig::expected_descendants(
            parse_value("prune", beta)?,
            parse_value("prune", theta)?,
        ),
        _ => {
            return Err(invalid(
                "prune",
                format!(
                    "expected off, front:<beta>, linear:<beta> or ed:<theta>:<beta>, got {s:?}"
                ),
            ))
        }
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Outcome of a run, mapped onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RunStatus {
    Success,
    ValidationFailed,
    PartialFailure { failed: u64, total: u64 },
    TotalFailure,
    AcceptanceFailed,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::TotalFailure => 1,
            RunStatus::ValidationFailed => 2,
            RunStatus::PartialFailure { .. } => 3,
            RunStatus::AcceptanceFailed => 4,
        }
    }

    fn from_failures(failed: u64, total: u64) -> Self {
        match failed {
            0 => RunStatus::Success,
            f if f == total => RunStatus::TotalFailure,
            f => RunStatus::PartialFailure { failed: f, total },
        }
    }
}

/// Exit code for an error raised before or during a run.
pub fn error_exit_code(e: &Error) -> i32 {
    match e {
        Error::InvalidParameter { .. } | Error::Parse(_) => 2,
        _ => 1,
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub files: Vec<PathBuf>,
    pub status: RunStatus,
}

/// A CSV table with the schema line; rows are pre-formatted.
struct Table {
    header: &'static str,
    rows: Vec<String>,
}

impl Table {
    fn new(header: &'static str) -> Self {
        Table {
            header,
            rows: Vec::new(),
        }
    }

    fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(f, "{SCHEMA_LINE}")?;
        writeln!(f, "{}", self.header)?;
        for r in &self.rows {
            writeln!(f, "{r}")?;
        }
        f.flush()?;
        Ok(())
    }
}

fn digest(rows: &[String]) -> String {
    let mut h = Sha256::new();
    for r in rows {
        h.update(r.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| invalid("workers", e.to_string()))
}

/// Per-replica results collected in replica order.
fn replicas<T: Send>(n: u64, f: impl Fn(u64) -> T + Sync + Send) -> Vec<T> {
    (0..n).into_par_iter().map(f).collect()
}

/// Validate, execute and write outputs plus `manifest.json` to `out_dir`.
pub fn run(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir)?;
    let pool = thread_pool(config.workers)?;
    let (tables, digests, status, notes) = pool.install(|| execute(config))?;
    let mut files = Vec::new();
    for (name, table) in &tables {
        let path = config.out_dir.join(name);
        table.write(&path)?;
        files.push(path);
    }
    let manifest = RunManifest {
        command: config.command.name().to_string(),
        seed: config.seed,
        replica_count: config.replicas,
        parameters: config.resolved_parameters(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        per_replica_digest: digests,
        notes,
    };
    let mpath = config.out_dir.join("manifest.json");
    fs::write(&mpath, manifest.to_json()?)?;
    files.push(mpath);
    Ok(RunOutcome {
        manifest,
        files,
        status,
    })
}

type Executed = (
    Vec<(&'static str, Table)>,
    Vec<String>,
    RunStatus,
    Vec<String>,
);

fn execute(config: &ExperimentConfig) -> Result<Executed> {
    match config.command {
        Command::SimulateBbm => run_simulate_bbm(config),
        Command::SampleZeta => run_sample_zeta(config),
        Command::SampleCluster => run_sample_cluster(config),
        Command::Theorem1 => run_theorem1(config),
        Command::Theorem2 => run_theorem2(config),
        Command::Validate => run_validate(config),
        Command::Report => run_report(config),
    }
}

fn run_simulate_bbm(config: &ExperimentConfig) -> Result<Executed> {
    let t: f64 = config.get("t")?;
    let prune = parse_prune(config.raw("prune"))?;
    let cap = config.count("event-cap")?;
    let m = centering(t);
    let rows = replicas(config.replicas, |i| {
        match simulate_bbm_capped(t, &prune, StreamKey::replica(config.seed, i), cap) {
            Ok(s) => {
                let max = s.max_height().unwrap_or(f64::NAN);
                format!(
                    "{i},{},{max},{},{},{},false",
                    s.len(),
                    max - m,
                    derivative_martingale(&s, 1.0),
                    s.pruned_mass_flag
                )
            }
            Err(e) => {
                log::warn!("replica {i} failed: {e}");
                format!("{i},0,NaN,NaN,NaN,false,true")
            }
        }
    });
    let failed = rows.iter().filter(|r| r.ends_with(",true")).count() as u64;
    let digests = rows
        .iter()
        .map(|r| digest(std::slice::from_ref(r)))
        .collect();
    let mut table =
        Table::new("replica,alive,max_height,centred_max,derivative_martingale,pruned,failed");
    table.rows = rows;
    let notes = vec![format!("prune = {prune:?}"), format!("C_diamond = 1")];
    Ok((
        vec![("bbm.csv", table)],
        digests,
        RunStatus::from_failures(failed, config.replicas),
        notes,
    ))
}

fn run_sample_zeta(config: &ExperimentConfig) -> Result<Executed> {
    let grid = config.zeta_grid()?;
    let rows = replicas(config.replicas, |i| {
        sample_zeta(&grid, StreamKey::replica(config.seed, i))
            .map(|z| format!("{i},{},{},{}", z.value, z.argmin_s, z.coarse_value))
    })
    .into_iter()
    .collect::<Result<Vec<String>>>()?;
    let digests = rows
        .iter()
        .map(|r| digest(std::slice::from_ref(r)))
        .collect();
    let mut table = Table::new("replica,zeta,argmin_s,coarse_zeta");
    table.rows = rows;
    Ok((
        vec![("zeta.csv", table)],
        digests,
        RunStatus::Success,
        Vec::new(),
    ))
}

const BACKBONE_NOTE: &str =
    "backbone: one Bessel-3 path from 0 used at every timestamp; small-s timestamps match the cluster law only in total variation";

/// Sample `n` clusters with replica keys from `seed`; failures are kept as
/// messages.
pub fn sample_cluster_pool(
    sampler: &ClusterSampler,
    seed: u64,
    n: u64,
) -> Vec<std::result::Result<ClusterSample, String>> {
    replicas(n, |i| {
        sampler.sample(StreamKey::replica(seed, i)).map_err(|e| {
            log::warn!("cluster replica {i} failed: {e}");
            e.to_string()
        })
    })
}

/// Write a pool as JSON lines, one cluster per line; failed replicas are
/// written as `null`.
pub fn write_pool(path: &Path, pool: &[std::result::Result<ClusterSample, String>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for c in pool {
        match c {
            Ok(c) => serde_json::to_writer(&mut f, c)?,
            Err(_) => f.write_all(b"null")?,
        }
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

/// Read a pool written by [`write_pool`], dropping failed replicas.
pub fn read_pool(path: &Path) -> Result<Vec<ClusterSample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let c: Option<ClusterSample> = serde_json::from_str(line)?;
        out.extend(c);
    }
    Ok(out)
}

fn cluster_rows(
    vlist: &[f64],
    pool: &[std::result::Result<ClusterSample, String>],
) -> Result<(Vec<String>, Vec<String>)> {
    let mut rows = Vec::new();
    let mut digests = Vec::new();
    for (i, c) in pool.iter().enumerate() {
        let mut mine = Vec::with_capacity(vlist.len());
        for &v in vlist {
            mine.push(match c {
                Ok(c) => {
                    let n = c.count_at(v)?;
                    let stat = fluctuation_of_count(n, v)
                        .map(|x| x.to_string())
                        .unwrap_or_else(|_| "NaN".into());
                    format!("{i},{v},{n},{stat},false")
                }
                Err(_) => format!("{i},{v},0,NaN,true"),
            });
        }
        digests.push(digest(&mine));
        rows.extend(mine);
    }
    Ok((rows, digests))
}

fn run_sample_cluster(config: &ExperimentConfig) -> Result<Executed> {
    let (vlist, depths, r_trunc, opts) = config.cluster_setup()?;
    let sampler = ClusterSampler::new(&depths, r_trunc, opts)?;
    let pool = sample_cluster_pool(&sampler, config.seed, config.replicas);
    write_pool(&config.out_dir.join("pool.jsonl"), &pool)?;
    let (rows, digests) = cluster_rows(&vlist, &pool)?;
    let failed = pool.iter().filter(|c| c.is_err()).count() as u64;
    let mut table = Table::new("replica,v,count,statistic,failed_flag");
    table.rows = rows;
    let notes = vec![
        format!("r_trunc = {r_trunc}"),
        format!("tail_bound_estimate = {}", sampler_tail(&pool)),
        "pool.jsonl holds the full depth grid of every cluster".to_string(),
        BACKBONE_NOTE.to_string(),
    ];
    Ok((
        vec![("clusters.csv", table)],
        digests,
        RunStatus::from_failures(failed, config.replicas),
        notes,
    ))
}

fn sampler_tail(pool: &[std::result::Result<ClusterSample, String>]) -> f64 {
    pool.iter()
        .flatten()
        .map(|c| c.tail_bound_estimate)
        .next()
        .unwrap_or(f64::NAN)
}

/// Per-depth summary of the fluctuation statistics against a `zeta`
/// reference ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Row {
    pub v: f64,
    pub n: usize,
    pub failed: usize,
    pub ks: f64,
    pub median_statistic: f64,
    pub undefined_frequency: f64,
    /// Median of `log C([-v, 0]) / (sqrt2 v)`.
    pub median_log_ratio: f64,
    pub zeta_q10: f64,
    pub zeta_q50: f64,
    pub zeta_q90: f64,
}

impl Theorem2Row {
    pub const CSV_HEADER: &'static str =
        "v,n,failed,ks,median_statistic,undefined_frequency,median_log_ratio,zeta_q10,zeta_q50,zeta_q90";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.v,
            self.n,
            self.failed,
            self.ks,
            self.median_statistic,
            self.undefined_frequency,
            self.median_log_ratio,
            self.zeta_q10,
            self.zeta_q50,
            self.zeta_q90
        )
    }
}

/// Summarise per-depth counts (`None` for failed replicas). An empty level
/// set counts as undefined and gets `log C = 0` in the log-ratio median.
pub fn summarize_theorem2(
    vlist: &[f64],
    counts: &[Vec<Option<u64>>],
    zeta: &[f64],
) -> Result<Vec<Theorem2Row>> {
    if zeta.is_empty() {
        return Err(invalid("zeta", "reference ensemble must not be empty"));
    }
    let mut zs = zeta.to_vec();
    zs.sort_by(|a, b| a.total_cmp(b));
    vlist
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let col: Vec<Option<u64>> = counts.iter().map(|c| c[j]).collect();
            let ok: Vec<u64> = col.iter().flatten().copied().collect();
            let stats: Vec<f64> = ok
                .iter()
                .filter_map(|&n| fluctuation_of_count(n, v).ok())
                .collect();
            let undefined = ok.len() - stats.len();
            let log_ratio: Vec<f64> = ok
                .iter()
                .map(|&n| {
                    if n == 0 {
                        0.0
                    } else {
                        (n as f64).ln() / (std::f64::consts::SQRT_2 * v)
                    }
                })
                .collect();
            let ks = if stats.is_empty() {
                1.0
            } else {
                ks_two_sample(&stats, &zs)?
            };
            Ok(Theorem2Row {
                v,
                n: ok.len(),
                failed: col.len() - ok.len(),
                ks,
                median_statistic: if stats.is_empty() {
                    f64::NAN
                } else {
                    median(&stats)
                },
                undefined_frequency: if ok.is_empty() {
                    1.0
                } else {
                    undefined as f64 / ok.len() as f64
                },
                median_log_ratio: if log_ratio.is_empty() {
                    f64::NAN
                } else {
                    median(&log_ratio)
                },
                zeta_q10: quantile(&zs, 0.1),
                zeta_q50: quantile(&zs, 0.5),
                zeta_q90: quantile(&zs, 0.9),
            })
        })
        .collect()
}

/// Pass/fail of the convergence-trend checks on a theorem2 summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendCheck {
    pub ks_not_worse: bool,
    pub ks_finite: bool,
    pub undefined_rare: bool,
    pub median_in_band: bool,
    pub log_ratio_increasing: bool,
    pub log_ratio_above: bool,
}

impl TrendCheck {
    /// KS at the deepest `v` at most KS at the shallowest plus 0.05, all KS
    /// finite, under 5% undefined and the median inside the `zeta` 10-90%
    /// band at the deepest `v`; the log ratio increasing and above 0.7 there.
    pub fn evaluate(rows: &[Theorem2Row]) -> Option<TrendCheck> {
        let (first, last) = (rows.first()?, rows.last()?);
        Some(TrendCheck {
            ks_not_worse: last.ks <= first.ks + 0.05,
            ks_finite: rows.iter().all(|r| r.ks.is_finite()),
            undefined_rare: last.undefined_frequency < 0.05,
            median_in_band: (last.zeta_q10..=last.zeta_q90).contains(&last.median_statistic),
            log_ratio_increasing: rows
                .windows(2)
                .all(|w| w[1].median_log_ratio > w[0].median_log_ratio),
            log_ratio_above: last.median_log_ratio > 0.7,
        })
    }

    pub fn fluctuation_ok(&self) -> bool {
        self.ks_not_worse && self.ks_finite && self.undefined_rare && self.median_in_band
    }

    pub fn growth_ok(&self) -> bool {
        self.log_ratio_increasing && self.log_ratio_above
    }
}

/// Output of [`theorem2_pipeline`].
#[derive(Debug, Clone)]
pub struct Theorem2Output {
    pub rows: Vec<Theorem2Row>,
    pub pool: Vec<std::result::Result<ClusterSample, String>>,
    pub zeta: Vec<f64>,
}

/// Sample `replicas` clusters measured at every `v` in `v_list`, a `zeta`
/// ensemble of `replicas * len(v_list)` values, and summarise.
pub fn theorem2_pipeline(v_list: &[f64], replicas: u64, seed: u64) -> Result<Theorem2Output> {
    let mut cfg = ExperimentConfig::new(Command::Theorem2);
    cfg.seed = seed;
    cfg.replicas = replicas;
    cfg.set(
        "vlist",
        &v_list
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    )?;
    cfg.validate()?;
    theorem2_from_config(&cfg, None)
}

/// Stream separating the `zeta` reference ensemble from cluster replicas.
const ZETA_REFERENCE: u64 = 0x7a65_7461;

fn theorem2_from_config(
    cfg: &ExperimentConfig,
    pool_path: Option<&Path>,
) -> Result<Theorem2Output> {
    let (vlist, depths, r_trunc, opts) = cfg.cluster_setup()?;
    let pool = match pool_path {
        Some(p) => read_pool(p)?.into_iter().map(Ok).collect(),
        None => {
            let sampler = ClusterSampler::new(&depths, r_trunc, opts)?;
            sample_cluster_pool(&sampler, cfg.seed, cfg.replicas)
        }
    };
    let n_zeta = match cfg.raw("zeta-replicas") {
        "auto" => pool.len() as u64 * vlist.len() as u64,
        _ => cfg.count("zeta-replicas")?,
    };
    let zkey = StreamKey::from_seed(cfg.seed).child(ZETA_REFERENCE);
    let grid = ZetaGrid::default();
    let zeta = replicas(n_zeta.max(1), |i| {
        sample_zeta(&grid, zkey.child(i)).map(|z| z.value)
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let counts = pool
        .iter()
        .map(|c| {
            vlist
                .iter()
                .map(|&v| match c {
                    Ok(c) => c.count_at(v).map(Some),
                    Err(_) => Ok(None),
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let rows = summarize_theorem2(&vlist, &counts, &zeta)?;
    Ok(Theorem2Output { rows, pool, zeta })
}

fn run_theorem2(config: &ExperimentConfig) -> Result<Executed> {
    let pool_path = match config.raw("cluster-pool") {
        "" => None,
        p => Some(PathBuf::from(p)),
    };
    let out = theorem2_from_config(config, pool_path.as_deref())?;
    let vlist = config.list("vlist")?;
    if pool_path.is_none() {
        write_pool(&config.out_dir.join("pool.jsonl"), &out.pool)?;
    }
    let (rows, digests) = cluster_rows(&vlist, &out.pool)?;
    let mut fluct = Table::new("replica,v,count,statistic,failed_flag");
    fluct.rows = rows;
    let mut zeta = Table::new("replica,zeta");
    zeta.rows = out
        .zeta
        .iter()
        .enumerate()
        .map(|(i, z)| format!("{i},{z}"))
        .collect();
    let mut summary = Table::new(Theorem2Row::CSV_HEADER);
    summary.rows = out.rows.iter().map(Theorem2Row::csv_row).collect();
    let failed = out.pool.iter().filter(|c| c.is_err()).count() as u64;
    Ok((
        vec![
            ("fluctuation.csv", fluct),
            ("zeta_reference.csv", zeta),
            ("summary.csv", summary),
        ],
        digests,
        RunStatus::from_failures(failed, out.pool.len() as u64),
        vec![
            "statistic = (sqrt2 v - log C([-v,0])) / v^(2/3)".to_string(),
            BACKBONE_NOTE.to_string(),
        ],
    ))
}

fn run_theorem1(config: &ExperimentConfig) -> Result<Executed> {
    let vs = config.list("v")?;
    let vfit = config.list("vfit")?;
    let z_source: ZSource = config.raw("z").parse()?;
    let assemblies = config.count("assemblies")?;
    let pool = read_pool(Path::new(config.raw("cluster-pool")))?;
    if pool.is_empty() {
        return Err(invalid("cluster-pool", "pool holds no successful clusters"));
    }
    let covered = pool
        .iter()
        .map(ClusterSample::max_depth)
        .fold(f64::INFINITY, f64::min);
    let v_max = *vs.last().unwrap();
    if covered < v_max {
        return Err(Error::DepthCoverage {
            required: v_max,
            available: covered,
        });
    }
    let root = StreamKey::from_seed(config.seed);
    let cstar = estimate_cstar(&pool, &vfit, root.child(0))?;
    let akey = root.child(1);
    let v_floor = config.vfloor(&vs)?;
    let rows = replicas(assemblies, |a| {
        let key = akey.child(a);
        let fail = |z: f64, e: &Error| {
            vs.iter()
                .map(|v| format!("{a},{v},{z},0,0,NaN,true,\"{e}\""))
                .collect()
        };
        let z = match draw_z(z_source, key.child(0)) {
            Ok(z) => z,
            Err(e) => return fail(f64::NAN, &e),
        };
        match assemble_from_pool(z, &vs, v_floor, &pool, key.child(1)) {
            Ok(asm) => vs
                .iter()
                .enumerate()
                .map(|(j, &v)| {
                    let ratio =
                        ratio_statistic(asm.counts[j], z, cstar.value, v).unwrap_or(f64::NAN);
                    format!(
                        "{a},{v},{z},{},{},{ratio},false,\"\"",
                        asm.tips[j], asm.counts[j]
                    )
                })
                .collect::<Vec<String>>(),
            Err(e) => fail(z, &e),
        }
    });
    let digests = rows.iter().map(|r| digest(r)).collect();
    let failed = rows
        .iter()
        .filter(|r| r.iter().any(|x| x.contains(",true,")))
        .count() as u64;
    let flat: Vec<String> = rows.into_iter().flatten().collect();
    let mut summary = Table::new("v,assemblies,failed,median_ratio,iqr_ratio");
    for &v in &vs {
        let ratios: Vec<f64> = flat
            .iter()
            .filter_map(|r| {
                let f: Vec<&str> = r.split(',').collect();
                (f[1].parse::<f64>().ok() == Some(v) && f[6] == "false")
                    .then(|| f[5].parse().ok())
                    .flatten()
            })
            .collect();
        summary.rows.push(format!(
            "{v},{},{},{},{}",
            assemblies,
            assemblies as usize - ratios.len(),
            median(&ratios),
            iqr(&ratios)
        ));
    }
    let mut table = Table::new("assembly,v,z,tips,count,ratio,failed,error");
    table.rows = flat;
    let mut cs = Table::new("v,estimate,ci_low,ci_high,top_share");
    for d in &cstar.per_depth {
        cs.rows.push(format!(
            "{},{},{},{},{}",
            d.v, d.estimate, d.ci_low, d.ci_high, d.top_share
        ));
    }
    cs.rows.push(format!(
        "all,{},{},{},NaN",
        cstar.value, cstar.ci_low, cstar.ci_high
    ));
    let notes = vec![
        format!("z source = {z_source}; only the product C* Z is meaningful (C_diamond = 1)"),
        format!(
            "cstar = {} [{}, {}], stable across vfit: {}, heavy tail: {}",
            cstar.value,
            cstar.ci_low,
            cstar.ci_high,
            cstar.stable(),
            cstar.heavy_tail
        ),
        format!("pool size = {}", pool.len()),
    ];
    Ok((
        vec![
            ("theorem1.csv", table),
            ("cstar.csv", cs),
            ("summary.csv", summary),
        ],
        digests,
        RunStatus::from_failures(failed, assemblies),
        notes,
    ))
}

fn run_validate(config: &ExperimentConfig) -> Result<Executed> {
    let size = match config.raw("size") {
        "full" => SuiteSize::FULL,
        _ => SuiteSize::QUICK,
    };
    let reports = validation_suite(size, StreamKey::from_seed(config.seed))?;
    let mut table = Table::new(TestReport::CSV_HEADER);
    table.rows = reports.iter().map(TestReport::csv_row).collect();
    let failed: Vec<&str> = reports
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.as_str())
        .collect();
    let status = if failed.is_empty() {
        RunStatus::Success
    } else {
        RunStatus::ValidationFailed
    };
    let notes = failed.iter().map(|n| format!("failed: {n}")).collect();
    Ok((vec![("validation.csv", table)], Vec::new(), status, notes))
}

/// Read a runner CSV, skipping the schema line.
pub fn read_table(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?
        .clone();
    rdr.records()
        .map(|r| {
            let r = r.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            Ok(headers
                .iter()
                .map(String::from)
                .zip(r.iter().map(String::from))
                .collect())
        })
        .collect()
}

fn run_report(config: &ExperimentConfig) -> Result<Executed> {
    let input = PathBuf::from(config.raw("input"));
    let fluct = read_table(&input.join("fluctuation.csv"))?;
    let zeta: Vec<f64> = read_table(&input.join("zeta_reference.csv"))?
        .iter()
        .map(|r| parse_value("zeta", &r["zeta"]))
        .collect::<Result<_>>()?;
    let mut by_replica: BTreeMap<u64, BTreeMap<u64, Option<u64>>> = BTreeMap::new();
    let mut vset: Vec<f64> = Vec::new();
    for r in &fluct {
        let rep: u64 = parse_value("replica", &r["replica"])?;
        let v: f64 = parse_value("v", &r["v"])?;
        if !vset.contains(&v) {
            vset.push(v);
        }
        let count = if r["failed_flag"] == "true" {
            None
        } else {
            Some(parse_value("count", &r["count"])?)
        };
        by_replica
            .entry(rep)
            .or_default()
            .insert(v.to_bits(), count);
    }
    vset.sort_by(|a, b| a.total_cmp(b));
    let counts: Vec<Vec<Option<u64>>> = by_replica
        .values()
        .map(|m| {
            vset.iter()
                .map(|v| m.get(&v.to_bits()).copied().flatten())
                .collect()
        })
        .collect();
    let rows = summarize_theorem2(&vset, &counts, &zeta)?;
    let mut table = Table::new(Theorem2Row::CSV_HEADER);
    table.rows = rows.iter().map(Theorem2Row::csv_row).collect();
    let mut notes = vec![format!("input = {}", input.display())];
    let mut status = RunStatus::Success;
    if config.get::<bool>("check")? {
        let check =
            TrendCheck::evaluate(&rows).ok_or_else(|| invalid("input", "no depths found"))?;
        notes.push(format!("trend check: {check:?}"));
        if !(check.fluctuation_ok() && check.growth_ok()) {
            status = RunStatus::AcceptanceFailed;
        }
    }
    Ok((vec![("report.csv", table)], Vec::new(), status, notes))
}
