//! `brokershard`: runs simulations and parameter sweeps, prints shard-failure
//! tables, generates workloads and validates configs.

use std::error::Error;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use brokershard::baselines::Policy;
use brokershard::config::Config;
use brokershard::metrics::{export_run, RunReport};
use brokershard::security::{
    amplified_malicious_fraction, evaluate_point, write_param_sweep, FailureKind, ParamSweepRow,
};
use brokershard::sim::run_simulation;
use brokershard::workload::{load_workload, write_csv_trace, WorkloadTx};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing::info;

type CliResult<T> = Result<T, Box<dyn Error>>;

/// Environment variable that overrides the configured output directory.
const OUT_ENV: &str = "BROKERSHARD_OUT";

#[derive(Debug, Parser)]
#[command(name = "brokershard", version, about = "Broker-mediated sharding simulator and security analysis")]
struct Cli {
    /// Log level filter, e.g. `info` or `brokershard=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one policy, or all four on the same workload.
    Run(RunArgs),
    /// Run once per value of one config key, one output subdirectory each.
    Sweep(SweepArgs),
    /// Failure-probability tables.
    #[command(subcommand)]
    Security(SecurityCommand),
    /// Write the configured workload as a CSV trace.
    GenWorkload(GenArgs),
    /// Parse and validate a config, printing its canonical form.
    ValidateConfig { path: PathBuf },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config; defaults apply to anything it leaves out.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `key=value` override (dotted path or alias such as `S`, `K`,
    /// `N_TX`, `latency_ms`). Repeatable; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory; wins over the config and the environment.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyChoice {
    Brokerchain,
    Monoxide,
    Lbf,
    Metis,
    All,
}

impl PolicyChoice {
    fn policies(self) -> Vec<Policy> {
        match self {
            PolicyChoice::Brokerchain => vec![Policy::BrokerChain],
            PolicyChoice::Monoxide => vec![Policy::Monoxide],
            PolicyChoice::Lbf => vec![Policy::Lbf],
            PolicyChoice::Metis => vec![Policy::MetisOnly],
            PolicyChoice::All => Policy::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Policy to run; defaults to the config's. `all` runs the four
    /// policies on one workload, each in its own subdirectory.
    #[arg(long, value_enum)]
    policy: Option<PolicyChoice>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, value_enum)]
    policy: Option<PolicyChoice>,
    /// `KEY=v1,v2,...`
    #[arg(long, value_name = "KEY=V1,V2,...")]
    vary: String,
}

#[derive(Debug, Subcommand)]
enum SecurityCommand {
    /// Amplified malicious fraction υ = φ / (φ + α(1 − φ)).
    Upsilon {
        #[arg(long)]
        phi: f64,
        #[arg(long)]
        alpha: f64,
    },
    /// P-shard failure probability over committee sizes and fractions.
    Pshard {
        /// Sizes: `a..b`, `a..b:step` or a comma list.
        #[arg(long)]
        m: String,
        /// Malicious fractions φ, comma separated.
        #[arg(long)]
        phi: String,
        /// Honest-solving rate; υ is derived from φ and α.
        #[arg(long, default_value_t = 1.0)]
        alpha: f64,
        #[command(flatten)]
        common: SecurityCommon,
    },
    /// M-shard failure probability for a fixed node total split over S.
    Mshard {
        /// Total nodes ϑ·S.
        #[arg(long)]
        total: u64,
        /// Shard counts, comma separated.
        #[arg(long = "S", value_name = "S")]
        shards: String,
        /// Fractions φ: `a..b:step` or a comma list.
        #[arg(long, default_value = "0.05,0.1,0.15,0.2,0.25,0.3")]
        phi: String,
        #[command(flatten)]
        common: SecurityCommon,
    },
}

#[derive(Debug, Args)]
struct SecurityCommon {
    /// Monte Carlo trials per point; 0 skips the estimate.
    #[arg(long, default_value_t = 0)]
    mc_trials: u64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// CSV trace destination.
    #[arg(long)]
    trace: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::new(&cli.log))
        .with_writer(io::stderr)
        .init();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run(args) => {
            let cfg = load_config(&args.config)?;
            let policies = choose(args.policy, &cfg);
            let dir = PathBuf::from(&cfg.output_dir);
            let reports = run_policies(&cfg, &policies, &dir)?;
            for r in &reports {
                println!("{}", summary_line(r));
            }
            Ok(())
        }
        Command::Sweep(args) => sweep(args),
        Command::Security(cmd) => security(cmd),
        Command::GenWorkload(args) => {
            let cfg = load_config(&args.config)?;
            let txs = load_workload(&cfg.resolved_workload())?;
            if let Some(parent) = args.trace.parent() {
                fs::create_dir_all(parent)?;
            }
            write_csv_trace(&txs, fs::File::create(&args.trace)?)?;
            println!("{} transactions -> {}", txs.len(), args.trace.display());
            Ok(())
        }
        Command::ValidateConfig { path } => {
            let cfg = Config::load(&path)?;
            println!("{}", cfg.to_json());
            Ok(())
        }
    }
}

/// File, then environment, then `--set`, then `--out`.
fn load_config(args: &ConfigArgs) -> CliResult<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Ok(dir) = std::env::var(OUT_ENV) {
        if !dir.is_empty() {
            cfg.output_dir = dir;
        }
    }
    cfg.apply_overrides(args.overrides.iter().map(String::as_str))?;
    if let Some(out) = &args.out {
        cfg.output_dir = out.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn choose(choice: Option<PolicyChoice>, cfg: &Config) -> Vec<Policy> {
    choice.map_or_else(|| vec![cfg.policy], PolicyChoice::policies)
}

/// Runs each policy on one shared workload. A single policy writes straight
/// into `dir`; several get one subdirectory each.
fn run_policies(cfg: &Config, policies: &[Policy], dir: &Path) -> CliResult<Vec<RunReport>> {
    let txs: Vec<WorkloadTx> = load_workload(&cfg.resolved_workload())?;
    let mut reports = Vec::new();
    for &policy in policies {
        let target = if policies.len() == 1 {
            dir.to_path_buf()
        } else {
            dir.join(policy.name())
        };
        let mut run_cfg = cfg.clone();
        run_cfg.policy = policy;
        info!(%policy, dir = %target.display(), "running");
        let out = run_simulation(&run_cfg, &txs, policy)?;
        export_run(&target, &out.report, &out.metrics)?;
        reports.push(out.report);
    }
    Ok(reports)
}

fn summary_line(r: &RunReport) -> String {
    format!(
        "{}: S={} confirmed {}/{} tps {:.1} mean latency {:.2}s ctx ratio {:.3} workload variance {:.1} refunded {}",
        r.header.policy,
        r.header.shards,
        r.confirmed,
        r.injected,
        r.tps,
        r.latency.mean_ms / 1000.0,
        r.ctx_ratio,
        r.workload.variance,
        r.ctx.refunded
    )
}

const SWEEP_COLUMNS: [&str; 10] = [
    "param",
    "value",
    "policy",
    "shards",
    "ctx_ratio",
    "analytic_ctx_ratio",
    "tps",
    "mean_latency_ms",
    "workload_total",
    "workload_variance",
];

fn sweep(args: SweepArgs) -> CliResult<()> {
    let base = load_config(&args.config)?;
    let (key, values) = args
        .vary
        .split_once('=')
        .ok_or_else(|| format!("--vary expects KEY=v1,v2,..., got {:?}", args.vary))?;
    let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(format!("--vary {key} has no values").into());
    }
    let root = PathBuf::from(&base.output_dir);
    fs::create_dir_all(&root)?;
    let mut csv = csv::Writer::from_path(root.join("sweep.csv"))?;
    csv.write_record(SWEEP_COLUMNS)?;
    for value in values {
        let mut cfg = base.clone();
        cfg.set(key, value)?;
        let policies = choose(args.policy, &cfg);
        let dir = root.join(format!("{key}={value}"));
        for r in run_policies(&cfg, &policies, &dir)? {
            println!("{key}={value} {}", summary_line(&r));
            let s = r.header.shards as f64;
            csv.write_record([
                key.to_string(),
                value.to_string(),
                r.header.policy.clone(),
                r.header.shards.to_string(),
                r.ctx_ratio.to_string(),
                ((s - 1.0) / s).to_string(),
                r.tps.to_string(),
                r.latency.mean_ms.to_string(),
                r.workload.total.to_string(),
                r.workload.variance.to_string(),
            ])?;
        }
    }
    csv.flush()?;
    Ok(())
}

fn security(cmd: SecurityCommand) -> CliResult<()> {
    let (rows, out) = match cmd {
        SecurityCommand::Upsilon { phi, alpha } => {
            println!("{:.6}", amplified_malicious_fraction(phi, alpha)?);
            return Ok(());
        }
        SecurityCommand::Pshard { m, phi, alpha, common } => {
            let mut rows = Vec::new();
            for phi in parse_f64_list(&phi)? {
                let upsilon = amplified_malicious_fraction(phi, alpha)?;
                for m in parse_u64_range(&m)? {
                    rows.push(evaluate_point(FailureKind::Pshard { m, upsilon }, common.mc_trials, common.seed)?);
                }
            }
            (rows, common.out)
        }
        SecurityCommand::Mshard {
            total,
            shards,
            phi,
            common,
        } => {
            let mut rows = Vec::new();
            for s in parse_u64_range(&shards)? {
                if s == 0 || total % s != 0 {
                    return Err(format!("S = {s} does not divide the {total} nodes evenly").into());
                }
                for phi in parse_f64_list(&phi)? {
                    let kind = FailureKind::Mshard {
                        theta: total / s,
                        shards: s,
                        phi,
                    };
                    rows.push(evaluate_point(kind, common.mc_trials, common.seed)?);
                }
            }
            (rows, common.out)
        }
    };
    emit_rows(&rows, out.as_deref())
}

fn emit_rows(rows: &[ParamSweepRow], out: Option<&Path>) -> CliResult<()> {
    match out {
        Some(path) => {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent)?;
            }
            write_param_sweep(fs::File::create(path)?, rows)?;
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_param_sweep(&mut lock, rows)?;
            lock.flush()?;
        }
    }
    Ok(())
}

/// `a..b` (inclusive), `a..b:step`, or `a,b,c`.
fn parse_u64_range(text: &str) -> CliResult<Vec<u64>> {
    if let Some((lo, rest)) = text.split_once("..") {
        let (hi, step) = rest.split_once(':').unwrap_or((rest, "1"));
        let (lo, hi, step): (u64, u64, u64) = (lo.trim().parse()?, hi.trim().parse()?, step.trim().parse()?);
        if step == 0 || lo > hi {
            return Err(format!("bad range {text:?}").into());
        }
        return Ok((lo..=hi).step_by(step as usize).collect());
    }
    text.split(',').map(|v| Ok(v.trim().parse()?)).collect()
}

/// `a..b:step` (inclusive up to rounding) or `a,b,c`.
fn parse_f64_list(text: &str) -> CliResult<Vec<f64>> {
    if let Some((lo, rest)) = text.split_once("..") {
        let (hi, step) = rest
            .split_once(':')
            .ok_or_else(|| format!("fraction range {text:?} needs a step, as in 0.05..0.3:0.05"))?;
        let (lo, hi, step): (f64, f64, f64) = (lo.trim().parse()?, hi.trim().parse()?, step.trim().parse()?);
        if step.is_nan() || step <= 0.0 || lo > hi {
            return Err(format!("bad range {text:?}").into());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as u64;
        return Ok((0..=n).map(|i| lo + i as f64 * step).collect());
    }
    text.split(',').map(|v| Ok(v.trim().parse()?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_parse() {
        assert_eq!(parse_u64_range("100..130:10").unwrap(), vec![100, 110, 120, 130]);
        assert_eq!(parse_u64_range("16,24").unwrap(), vec![16, 24]);
        assert_eq!(parse_u64_range("3..5").unwrap(), vec![3, 4, 5]);
        assert!(parse_u64_range("5..3").is_err());
        let f = parse_f64_list("0.1..0.3:0.1").unwrap();
        assert_eq!(f.len(), 3);
        assert!((f[2] - 0.3).abs() < 1e-12);
        assert_eq!(parse_f64_list("0.08,0.2").unwrap(), vec![0.08, 0.2]);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
