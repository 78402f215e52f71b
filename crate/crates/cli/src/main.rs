//! `hamflow`: train, inspect and check Hamiltonian networks from the shell.
//!
//! Exit codes: 0 success, 1 a check failed, 2 non-finite training loss,
//! 3 bad configuration or malformed input.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use commands::Failure;

#[derive(Parser, Debug)]
#[command(name = "hamflow", version, about = "Hamiltonian deep neural networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Overrides the seed of the configuration or command.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the sample count of the configuration or command.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Suppresses summaries on standard error.
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model from a configuration file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Model file to write.
        #[arg(long)]
        out: PathBuf,
        /// Loss-history CSV; defaults to the model path with extension `loss.csv`.
        #[arg(long)]
        loss: Option<PathBuf>,
    },
    /// Evaluate a model on the points of a CSV file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic parameter gradients with finite differences.
    GradCheck {
        #[arg(long)]
        model: PathBuf,
        /// Input point as comma-separated values; drawn from the seed if absent.
        #[arg(long, allow_hyphen_values = true)]
        xi: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Backward sensitivity products along the trajectory of one input.
    Bsm {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        xi: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Largest deviation between a model and its shallow-sum form.
    UapEquiv {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Perturb rank-deficient terms of a shallow sum to full rank.
    RankRepair {
        /// Shallow-sum file.
        #[arg(long)]
        sum: PathBuf,
        #[arg(long)]
        eps: f64,
        #[arg(long, default_value_t = -1.0, allow_hyphen_values = true)]
        domain_lo: f64,
        #[arg(long, default_value_t = 1.0, allow_hyphen_values = true)]
        domain_hi: f64,
        /// Repaired shallow-sum file to write.
        #[arg(long)]
        out: PathBuf,
        /// Report CSV; standard output if absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train over a grid of depths and compare with the depth bound.
    DepthSweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var("HAMFLOW_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| Failure::input(format!("HAMFLOW_THREADS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Failure::input(e.to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    let c = &cli.common;
    match cli.command {
        Command::Train { config, out, loss } => commands::train(&config, &out, loss.as_deref(), c),
        Command::Eval { model, points, out } => commands::eval(&model, &points, out.as_deref()),
        Command::GradCheck { model, xi, out } => commands::grad_check(&model, xi.as_deref(), out.as_deref(), c),
        Command::Bsm { model, xi, out } => commands::bsm(&model, xi.as_deref(), out.as_deref(), c),
        Command::UapEquiv { model, out } => commands::uap_equiv(&model, out.as_deref(), c),
        Command::RankRepair {
            sum,
            eps,
            domain_lo,
            domain_hi,
            out,
            report,
        } => commands::rank_repair(&sum, eps, (domain_lo, domain_hi), &out, report.as_deref(), c),
        Command::DepthSweep { config, out } => commands::depth_sweep(&config, out.as_deref(), c),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("hamflow: {}", line.trim_start_matches("error: "));
            return ExitCode::from(3);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("hamflow: {}", f.message.replace('\n', " "));
            ExitCode::from(f.code)
        }
    }
}
