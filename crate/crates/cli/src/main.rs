//! `ubna`: pre-train, adapt, sweep, evaluate and report from the command
//! line. Exit codes: 0 success, 2 usage error, 3 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ubna_cli::config::{Baseline, ProtocolKind, RunConfig};
use ubna_cli::{commands, UsageError};
use ubna_core::Method;

#[derive(Parser, Debug)]
#[command(name = "ubna", version, about = "Unsupervised batch-norm statistics adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Supervised pre-training on the source domain.
    Pretrain,
    /// Adapt a checkpoint's batch-norm statistics to the target domain.
    Adapt,
    /// Grid of adaptation runs over the decay factors.
    Sweep,
    /// Per-class IoU and mIoU of a checkpoint on the held-out set.
    Eval,
    /// Compare every method from one checkpoint.
    Report,
}

#[derive(clap::Args, Debug, Default)]
struct Flags {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// ubna0, ubna, ubna+, adabn or none.
    #[arg(long, global = true, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long, global = true, value_enum)]
    protocol: Option<ProtocolKind>,
    #[arg(long, global = true)]
    eta0: Option<f64>,
    /// One value, or a comma-separated grid for `sweep`.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1)]
    alpha_batch: Option<Vec<f64>>,
    /// One value, or a comma-separated grid for `sweep`.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1)]
    alpha_layer: Option<Vec<f64>>,
    /// Pre-training steps for `pretrain`, adaptation steps otherwise.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    /// Comma-separated class subset for the mean IoU.
    #[arg(long, global = true)]
    classes: Option<String>,
    /// Opt-in evaluation baseline.
    #[arg(long, global = true, value_enum)]
    baseline: Option<Baseline>,
}

fn parse_method(text: &str) -> Result<Method, String> {
    Method::parse(text).map_err(|e| e.to_string())
}

fn single(values: &[f64], flag: &str) -> anyhow::Result<f64> {
    match values {
        [v] => Ok(*v),
        _ => Err(UsageError(format!("--{flag} takes one value outside `sweep`")).into()),
    }
}

fn resolve(command: Command, flags: &Flags) -> anyhow::Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let mut cfg = RunConfig::from_file(path)?;
            if let Some(seed) = flags.seed {
                cfg.seed = seed;
            }
            cfg
        }
        None => RunConfig::builtin(flags.seed.unwrap_or(0)),
    };
    if let Some(out) = &flags.out {
        cfg.out = out.clone();
    }
    if let Some(c) = &flags.checkpoint {
        cfg.checkpoint = Some(c.clone());
    }
    if let Some(m) = flags.method {
        cfg.adapt.method = m;
    }
    if let Some(p) = flags.protocol {
        cfg.adapt.protocol = p;
    }
    if let Some(e) = flags.eta0 {
        cfg.adapt.eta0 = e;
    }
    match command {
        Command::Pretrain => {
            if let Some(s) = flags.steps {
                cfg.pretrain.steps = s;
            }
            if let Some(b) = flags.batch_size {
                cfg.pretrain.batch_size = b;
            }
        }
        _ => {
            if let Some(s) = flags.steps {
                cfg.adapt.steps = s;
            }
            if let Some(b) = flags.batch_size {
                cfg.adapt.batch_size = b;
            }
        }
    }
    if command == Command::Sweep {
        if let Some(v) = &flags.alpha_batch {
            cfg.sweep.alpha_batch = v.clone();
        }
        if let Some(v) = &flags.alpha_layer {
            cfg.sweep.alpha_layer = v.clone();
        }
    } else {
        if let Some(v) = &flags.alpha_batch {
            cfg.adapt.alpha_batch = Some(single(v, "alpha-batch")?);
        }
        if let Some(v) = &flags.alpha_layer {
            cfg.adapt.alpha_layer = Some(single(v, "alpha-layer")?);
        }
    }
    if let Some(c) = &flags.classes {
        cfg.evaluation.classes = Some(c.clone());
    }
    if let Some(b) = flags.baseline {
        cfg.evaluation.baseline = Some(b);
    }
    cfg.resolve_alphas();
    Ok(cfg)
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = resolve(cli.command, &cli.flags)?;
    let echoed = cfg.echo()?;
    log::info!("resolved configuration written to {}", echoed.display());
    match cli.command {
        Command::Pretrain => commands::cmd_pretrain(&cfg),
        Command::Adapt => commands::cmd_adapt(&cfg),
        Command::Sweep => commands::cmd_sweep(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Report => commands::cmd_report(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("UBNA_LOG_LEVEL", "warn")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
