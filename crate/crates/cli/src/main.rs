use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfl_cli::commands::{self, CommandOutput, DcovArgs, SynthArgs};
use dfl_cli::config::{parse_list, RunConfig};
use dfl_cli::{CliError, EXIT_CONFIG};

/// Fair representation learning with distance covariance penalties.
#[derive(Debug, Parser)]
#[command(name = "dfl", version)]
struct Cli {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Records the run as deterministic in the resolved config.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the configured model; writes model, trajectory, metrics and resolved config.
    Train,
    /// Report metrics of a saved model on the configured data.
    Evaluate {
        model: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Audit a prediction CSV (probabilities, label, sensitive columns).
    Audit {
        predictions: PathBuf,
        #[arg(long)]
        classes: usize,
        /// Sensitive columns to audit, comma separated (default: all).
        #[arg(long, value_delimiter = ',')]
        columns: Vec<usize>,
    },
    /// Distance covariance between two header-less numeric CSVs.
    Dcov {
        x: PathBuf,
        z: PathBuf,
        #[arg(long)]
        naive: bool,
        #[arg(long)]
        fast: bool,
        #[arg(long)]
        conditional: bool,
        /// Label file (one integer per line) for --conditional.
        #[arg(long)]
        y: Option<PathBuf>,
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Generate a synthetic dataset as a matrix file plus provenance JSON.
    Synth {
        /// `toy` or `biased`.
        generator: String,
        output: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        p: usize,
        #[arg(long, default_value_t = 2.0)]
        bias: f64,
        #[arg(long, default_value_t = 0.1)]
        noise_sd: f64,
        /// `biased` (40/10/10/40) or `balanced`.
        #[arg(long, default_value = "biased")]
        composition: String,
    },
    /// Train an unconstrained classifier on a saved model's frozen representation.
    Probe {
        model: PathBuf,
        #[arg(long)]
        hidden: Option<usize>,
    },
    /// Select alpha by validation gaps under the accuracy filter.
    Sweep {
        /// Comma separated candidates (default: sweep.alphas from the config).
        #[arg(long)]
        alphas: Option<String>,
    },
}

fn run_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("this command needs --config".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_override("seed", &seed.to_string())?;
    }
    if cli.deterministic {
        cfg = cfg.with_override("deterministic", "true")?;
    }
    if let Some(out) = &cli.out {
        let abs = std::env::current_dir().map(|d| d.join(out)).unwrap_or_else(|_| out.clone());
        cfg = cfg.with_override("out", &abs.display().to_string())?;
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> Result<CommandOutput, CliError> {
    match &cli.command {
        Command::Train => commands::train(&run_config(cli)?),
        Command::Evaluate { model, split } => commands::evaluate(&run_config(cli)?, model, split),
        Command::Probe { model, hidden } => commands::probe(&run_config(cli)?, model, *hidden),
        Command::Sweep { alphas } => {
            let cfg = run_config(cli)?;
            let alphas = match alphas {
                Some(list) => parse_list("--alphas", list)?,
                None => cfg.sweep_alphas.clone(),
            };
            commands::sweep(&cfg, &alphas)
        }
        Command::Audit {
            predictions,
            classes,
            columns,
        } => commands::audit(predictions, *classes, columns),
        Command::Dcov {
            x,
            z,
            naive,
            fast,
            conditional,
            y,
            classes,
        } => commands::dcov(
            x,
            z,
            &DcovArgs {
                naive: *naive,
                fast: *fast,
                conditional: *conditional,
                y: y.clone(),
                classes: *classes,
            },
        ),
        Command::Synth {
            generator,
            output,
            n,
            p,
            bias,
            noise_sd,
            composition,
        } => commands::synth(
            &SynthArgs {
                generator: generator.clone(),
                n: *n,
                p: *p,
                bias: *bias,
                noise_sd: *noise_sd,
                composition: composition.clone(),
                seed: cli.seed.unwrap_or(0),
            },
            output,
        ),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_CONFIG),
            };
        }
    };
    match dispatch(&cli) {
        Ok(out) => {
            let mut stdout = std::io::stdout().lock();
            let _ = stdout.write_all(out.stdout.as_bytes());
            ExitCode::from(out.code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
