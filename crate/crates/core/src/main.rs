use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use freetime_qrnet::harness::data::{read_json, write_json};
use freetime_qrnet::harness::experiment::{prepare, run_benchmark, strategy_rows};
use freetime_qrnet::harness::metrics::{cost_ratio_cdf, write_cdf_csv, write_metrics_csv, Metrics, MetricsRow};
use freetime_qrnet::harness::oracle::oracle_suite;
use freetime_qrnet::harness::store::{load_prepared, save_iteration, save_prepared};
use freetime_qrnet::harness::RunConfig;
use freetime_qrnet::policy::{load_checkpoint, save_checkpoint, Architecture, Ensemble};
use freetime_qrnet::sampling::Strategy;
use freetime_qrnet::{par, Error, Result};

/// Free-terminal-time QRnet controllers with adaptive resampling.
#[derive(Parser)]
#[command(name = "ftqr", version)]
struct Cli {
    /// Run configuration (JSON); missing fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "ftqr-out")]
    out: PathBuf,
    /// Worker threads.
    #[arg(long, global = true, env = "FTQR_WORKERS")]
    workers: Option<usize>,
    /// Start from the desk-scale benchmark settings instead of the full-scale ones.
    #[arg(long, global = true)]
    benchmark: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Arch {
    Qrnet,
    Mlp,
}

impl From<Arch> for Architecture {
    fn from(a: Arch) -> Self {
        match a {
            Arch::Qrnet => Architecture::Qrnet,
            Arch::Mlp => Architecture::Mlp,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Directory written by `gen-data` (defaults to `--out`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Policy architecture (defaults to the config's).
    #[arg(long, value_enum)]
    arch: Option<Arch>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample and label the train, validation and test splits.
    GenData,
    /// Train the initial policy on the generated data.
    Train(DataArgs),
    /// Adaptive resampling at the first τ-deviation of each rollout.
    IvpArt(AdaptiveArgs),
    /// DAgger baseline: relabel states at fixed fractions of the rollout.
    Dagger(AdaptiveArgs),
    /// Closed-loop metrics of one policy, or of the mean of several.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoints to evaluate; more than one forms an ensemble.
        #[arg(long, required = true, num_args = 1..)]
        policy: Vec<PathBuf>,
    },
    /// Cost-ratio CDF from an `eval` output.
    Plot {
        /// Metrics JSON written by `eval`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Run the reference oracles; exits nonzero if any fails.
    Oracle,
    /// Every strategy over all configured seeds; writes one metrics table.
    Run {
        #[arg(long, value_enum)]
        arch: Option<Arch>,
    },
}

#[derive(Args)]
struct AdaptiveArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Iteration-0 checkpoint; trained from scratch when absent.
    #[arg(long)]
    policy: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
        None if cli.benchmark => RunConfig::benchmark(),
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
        cfg.experiment.seeds = vec![seed];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn data_dir<'a>(cli: &'a Cli, args: &'a DataArgs) -> &'a Path {
    args.data.as_deref().unwrap_or(&cli.out)
}

fn architecture(cfg: &RunConfig, arch: Option<Arch>) -> Architecture {
    arch.map(Architecture::from).unwrap_or(cfg.experiment.architecture)
}

fn run(cli: Cli) -> Result<ExitCode> {
    if let Some(w) = cli.workers {
        if !par::init_workers(w) {
            warn!("worker count {w} ignored");
        }
    }
    let cfg = load_config(&cli)?;
    fs::create_dir_all(&cli.out)?;
    write_json(&cfg, &cli.out.join("config.json"))?;
    match &cli.command {
        Command::GenData => {
            let prepared = prepare(&cfg, cfg.experiment.seed)?;
            for (split, r) in ["train", "val", "test"].iter().zip(&prepared.reports) {
                info!("{split}: convergence rate {:.3}", r.convergence_rate);
            }
            save_prepared(&prepared, &cli.out)?;
        }
        Command::Train(args) => {
            let prepared = load_prepared(&cfg, data_dir(&cli, args))?;
            let arch = architecture(&cfg, args.arch);
            let (policy, report) = prepared.train_initial(&cfg, arch)?;
            save_checkpoint(&policy, &cli.out.join("policy_0.json"))?;
            write_json(&report, &cli.out.join("training_0.json"))?;
        }
        Command::IvpArt(args) => adaptive(&cli, &cfg, args, cfg.ivp_art())?,
        Command::Dagger(args) => adaptive(&cli, &cfg, args, cfg.dagger())?,
        Command::Eval { data, policy } => {
            let prepared = load_prepared(&cfg, data_dir(&cli, data))?;
            let members = policy.iter().map(|p| load_checkpoint(p)).collect::<Result<Vec<_>>>()?;
            let m = if members.len() == 1 {
                prepared.evaluate(&cfg, &members[0])?
            } else {
                prepared.evaluate(&cfg, &Ensemble::new(members)?)?
            };
            info!("success {:.3}, mean ratio {:.3} ± {:.3}", m.success_rate, m.mean_ratio, m.std_ratio);
            write_json(&m, &cli.out.join("eval.json"))?;
            let row = MetricsRow::new("eval", "policy", prepared.seed, &m);
            write_metrics_csv(&[row], File::create(cli.out.join("eval.csv"))?)?;
        }
        Command::Plot { metrics } => {
            let path = metrics.clone().unwrap_or_else(|| cli.out.join("eval.json"));
            let m: Metrics = read_json(&path)?;
            let cdf = cost_ratio_cdf(&m.ratios)?;
            write_cdf_csv(&cdf, File::create(cli.out.join("cdf.csv"))?)?;
            info!("{} CDF points written", cdf.len());
        }
        Command::Oracle => {
            let report = oracle_suite(&cfg)?;
            for r in &report.results {
                let tag = if r.passed { "PASS" } else { "FAIL" };
                info!("{tag} {}: {:.3e} (tolerance {:.3e}) {}", r.name, r.measured, r.tolerance, r.detail);
            }
            write_json(&report, &cli.out.join("oracle.json"))?;
            if !report.all_passed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Run { arch } => {
            let rows = run_benchmark(&cfg, &[cfg.ivp_art(), cfg.dagger()], architecture(&cfg, *arch))?;
            write_metrics_csv(&rows, File::create(cli.out.join("metrics.csv"))?)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn adaptive(cli: &Cli, cfg: &RunConfig, args: &AdaptiveArgs, strategy: Strategy) -> Result<()> {
    let prepared = load_prepared(cfg, data_dir(cli, &args.data))?;
    let arch = architecture(cfg, args.data.arch);
    let initial = match &args.policy {
        Some(p) => load_checkpoint(p)?,
        None => prepared.initial_policy(cfg, arch)?,
    };
    let solver = cfg.solver_config()?;
    let run = prepared.run(cfg, &solver, &initial, strategy.clone(), arch)?;
    let m0 = prepared.evaluate(cfg, &initial)?;
    let rows = strategy_rows(cfg, &prepared, &m0, &run, strategy.name())?;
    let dir = cli.out.join(strategy.name());
    for (it, row) in run.iterations.iter().zip(&rows[1..]) {
        save_iteration(it, Some(row), &dir)?;
    }
    for (i, member) in run.ensemble.members.iter().enumerate() {
        save_checkpoint(member, &dir.join(format!("ensemble_{}.json", i + 1)))?;
    }
    write_metrics_csv(&rows, File::create(dir.join("metrics.csv"))?)?;
    for r in &rows {
        info!("{} {}: success {:.3}, ratio {:.3}", r.strategy, r.iteration, r.success_rate, r.mean_ratio);
    }
    Ok(())
}
