use std::path::PathBuf;
use std::process::ExitCode;

use bbm_core::runner::{self, Command, ExperimentConfig, RunOutcome};
use bbm_core::types::RunManifest;
use bbm_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "bbm",
    version,
    about = "Branching Brownian motion extremes Monte Carlo"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<String>,
    /// Worker threads; 0 uses every core.
    #[arg(long)]
    workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra copy of the manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Any other parameter as key=value; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate BBM to time t and record the maximum and derivative martingale.
    SimulateBbm {
        #[arg(long)]
        t: Option<f64>,
        /// off, front:<beta>, linear:<beta> or ed:<theta>:<beta>.
        #[arg(long)]
        prune: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Sample the Bessel-3 minimisation variable zeta.
    SampleZeta {
        #[command(flatten)]
        common: Common,
    },
    /// Sample clusters and record level-set counts at each depth.
    SampleCluster {
        /// Comma-separated depths.
        #[arg(long)]
        vlist: Option<String>,
        #[arg(long, conflicts_with = "auto_trunc")]
        rtrunc: Option<f64>,
        #[arg(long)]
        auto_trunc: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Assemble the limiting extremal process from a cluster pool.
    Theorem1 {
        /// Comma-separated depths.
        #[arg(long)]
        v: Option<String>,
        #[arg(long)]
        vfloor: Option<f64>,
        #[arg(long)]
        assemblies: Option<u64>,
        #[arg(long)]
        cluster_pool: Option<PathBuf>,
        /// A positive number or proxy:<t>.
        #[arg(long)]
        z: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Level-set fluctuations of clusters against the zeta ensemble.
    Theorem2 {
        #[arg(long)]
        vlist: Option<String>,
        #[arg(long)]
        cluster_pool: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run the validation suite against closed-form oracles.
    Validate {
        /// quick or full.
        #[arg(long)]
        size: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Summarise a theorem2 output directory.
    Report {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Exit with code 4 if the convergence trend checks fail.
        #[arg(long)]
        check: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Re-run a manifest and compare per-replica digests.
    Replay {
        manifest: PathBuf,
        /// Output directory; defaults to the one in the manifest.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn build(
    command: Command,
    common: &Common,
    specific: Vec<(&str, Option<String>)>,
) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::new(command);
    if let Some(path) = &common.config {
        cfg.apply_text(&std::fs::read_to_string(path)?)?;
    }
    cfg.apply_env_workers()?;
    let globals = [
        ("seed", common.seed.map(|s| s.to_string())),
        ("replicas", common.replicas.clone()),
        ("workers", common.workers.map(|w| w.to_string())),
        ("out", common.out.as_ref().map(|p| p.display().to_string())),
    ];
    for (k, v) in globals.into_iter().chain(specific) {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.apply_env_output_root();
    Ok(cfg)
}

fn path_str(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn finish(outcome: &RunOutcome, extra_manifest: Option<&PathBuf>) -> Result<i32> {
    if let Some(path) = extra_manifest {
        std::fs::write(path, outcome.manifest.to_json()?)?;
    }
    for f in &outcome.files {
        println!("{}", f.display());
    }
    for n in &outcome.manifest.notes {
        log::info!("{n}");
    }
    Ok(outcome.status.exit_code())
}

fn replay(manifest: &PathBuf, out: Option<PathBuf>, workers: Option<usize>) -> Result<i32> {
    let recorded = RunManifest::from_json(&std::fs::read_to_string(manifest)?)?;
    let mut cfg = ExperimentConfig::from_manifest(&recorded)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    let outcome = runner::run(&cfg)?;
    let code = finish(&outcome, None)?;
    if outcome.manifest.per_replica_digest != recorded.per_replica_digest {
        let first = recorded
            .per_replica_digest
            .iter()
            .zip(&outcome.manifest.per_replica_digest)
            .position(|(a, b)| a != b);
        eprintln!("replay digests differ (first mismatch at replica {first:?})");
        return Ok(4);
    }
    eprintln!(
        "replay matches {} replica digests",
        recorded.per_replica_digest.len()
    );
    Ok(code)
}

fn dispatch(cli: Cli) -> Result<i32> {
    let (cfg, extra) = match cli.command {
        Cmd::SimulateBbm { t, prune, common } => (
            build(
                Command::SimulateBbm,
                &common,
                vec![("t", t.map(|t| t.to_string())), ("prune", prune)],
            )?,
            common.manifest,
        ),
        Cmd::SampleZeta { common } => (
            build(Command::SampleZeta, &common, vec![])?,
            common.manifest,
        ),
        Cmd::SampleCluster {
            vlist,
            rtrunc,
            auto_trunc,
            common,
        } => {
            let r = match (rtrunc, auto_trunc) {
                (Some(r), _) => Some(r.to_string()),
                (None, true) => Some("auto".to_string()),
                (None, false) => None,
            };
            (
                build(
                    Command::SampleCluster,
                    &common,
                    vec![("vlist", vlist), ("rtrunc", r)],
                )?,
                common.manifest,
            )
        }
        Cmd::Theorem1 {
            v,
            vfloor,
            assemblies,
            cluster_pool,
            z,
            common,
        } => (
            build(
                Command::Theorem1,
                &common,
                vec![
                    ("v", v),
                    ("vfloor", vfloor.map(|x| x.to_string())),
                    ("assemblies", assemblies.map(|x| x.to_string())),
                    ("cluster-pool", path_str(&cluster_pool)),
                    ("z", z),
                ],
            )?,
            common.manifest,
        ),
        Cmd::Theorem2 {
            vlist,
            cluster_pool,
            common,
        } => (
            build(
                Command::Theorem2,
                &common,
                vec![("vlist", vlist), ("cluster-pool", path_str(&cluster_pool))],
            )?,
            common.manifest,
        ),
        Cmd::Validate { size, common } => (
            build(Command::Validate, &common, vec![("size", size)])?,
            common.manifest,
        ),
        Cmd::Report {
            input,
            check,
            common,
        } => (
            build(
                Command::Report,
                &common,
                vec![
                    ("input", path_str(&input)),
                    ("check", check.then(|| "true".to_string())),
                ],
            )?,
            common.manifest,
        ),
        Cmd::Replay {
            manifest,
            out,
            workers,
        } => return replay(&manifest, out, workers),
    };
    let outcome = runner::run(&cfg)?;
    finish(&outcome, extra.as_ref())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            runner::error_exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
