//! `nsmpp`: simulate, train and evaluate neural spectral marked point processes.
//!
//! Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.

mod commands;
mod config;
mod repro;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Command;
use crate::config::{extract_dotted, Layers, Override};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(
    name = "nsmpp",
    version,
    about = "Neural spectral marked point processes",
    after_help = "Any config key can be set with --section.key VALUE, e.g. --train.lr 1e-3 or --model.trunk '[16, 16, 4]'.\n\
                  Precedence: defaults < --config file < shorthand flags < dotted overrides."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Simulate a dataset by thinning.
    Simulate(RunArgs),
    /// Fit a kernel model to a dataset.
    Train(RunArgs),
    /// Predictive log-likelihood, intensity MAE and figure data.
    Eval(RunArgs),
    /// Re-run a run directory from its config.toml and compare outputs byte-wise.
    Repro(ReproArgs),
}

#[derive(Args)]
struct RunArgs {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Kernel family: exp, spectral or basis.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Time horizon.
    #[arg(long = "T")]
    horizon: Option<f64>,
    /// Number of sequences to simulate.
    #[arg(long)]
    n: Option<u64>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Spectral rank R.
    #[arg(long)]
    rank: Option<u64>,
    /// Dataset (.csv or .json).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fitted model checkpoint (eval).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// True model checkpoint; enables the intensity MAE in eval.
    #[arg(long)]
    true_model: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write kernel grids and intensity traces (eval).
    #[arg(long)]
    export_figures: bool,
    /// Worker threads (falls back to NSMPP_THREADS).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ReproArgs {
    /// A directory written by simulate, train or eval.
    dir: PathBuf,
    /// Re-run into this directory instead of a temporary one.
    #[arg(long)]
    keep: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn path_value(p: &std::path::Path) -> toml::Value {
    toml::Value::String(p.to_string_lossy().into_owned())
}

fn layers(args: &RunArgs, dotted: &[Override]) -> Result<Layers, CliError> {
    let mut l = match &args.config {
        Some(p) => Layers::from_file(p)?,
        None => Layers::new(),
    };
    let int = |v: u64| toml::Value::Integer(v as i64);
    let shorthands: [(&str, Option<toml::Value>); 12] = [
        ("model.family", args.model.clone().map(toml::Value::String)),
        ("model.mu", args.mu.map(toml::Value::Float)),
        ("model.alpha", args.alpha.map(toml::Value::Float)),
        ("model.beta", args.beta.map(toml::Value::Float)),
        ("domain.T", args.horizon.map(toml::Value::Float)),
        ("sim.n", args.n.map(int)),
        ("model.rank", args.rank.map(int)),
        ("io.data", args.data.as_deref().map(path_value)),
        ("io.checkpoint", args.checkpoint.as_deref().map(path_value)),
        ("io.true_model", args.true_model.as_deref().map(path_value)),
        ("io.out_dir", args.out.as_deref().map(path_value)),
        ("eval.export_figures", args.export_figures.then_some(toml::Value::Boolean(true))),
    ];
    for (key, value) in shorthands {
        if let Some(v) = value {
            l.set(key, v)?;
        }
    }
    if let Some(seed) = args.seed {
        // seeds can exceed i64; TOML integers cannot
        if seed > i64::MAX as u64 {
            return Err(CliError::Usage(format!("--seed {seed} exceeds {}", i64::MAX)));
        }
        l.set("seed", int(seed))?;
    }
    for (k, v) in dotted {
        l.set_literal(k, v)?;
    }
    Ok(l)
}

fn set_threads(flag: Option<usize>) -> Result<(), CliError> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("NSMPP_THREADS") {
            Ok(s) => Some(s.trim().parse().map_err(|_| CliError::Usage(format!("NSMPP_THREADS={s} is not a count")))?),
            Err(_) => None,
        },
    };
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(CliError::Usage("thread count must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        log::warn!("built without the `parallel` feature; running on one thread");
    }
    Ok(())
}

fn run_command(cmd: Command, args: &RunArgs, dotted: &[Override]) -> Result<(), CliError> {
    set_threads(args.threads)?;
    let mut cfg = layers(args, dotted)?.resolve()?;
    commands::resolve_paths(&mut cfg, cmd)?;
    let out = commands::out_dir(&cfg, cmd);
    commands::run(&cfg, cmd, &out)?;
    println!("outputs in {}", out.display());
    Ok(())
}

fn real_main() -> Result<(), CliError> {
    let (argv, dotted) = extract_dotted(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    match cli.command {
        Cmd::Simulate(a) => run_command(Command::Simulate, &a, &dotted),
        Cmd::Train(a) => run_command(Command::Train, &a, &dotted),
        Cmd::Eval(a) => run_command(Command::Eval, &a, &dotted),
        Cmd::Repro(a) => {
            if !dotted.is_empty() {
                return Err(CliError::Usage("repro replays the recorded config; overrides are not accepted".into()));
            }
            set_threads(a.threads)?;
            let report = repro::repro(&a.dir, a.keep.as_deref())?;
            for p in &report.missing {
                println!("missing from rerun: {}", p.display());
            }
            for p in &report.extra {
                println!("only in rerun: {}", p.display());
            }
            for p in &report.differing {
                println!("differs: {}", p.display());
            }
            if report.identical() {
                println!("reproduced: {} files identical", report.compared);
                Ok(())
            } else {
                Err(CliError::Numeric(format!("{} is not reproduced", a.dir.display())))
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
