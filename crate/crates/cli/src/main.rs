use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use polytd_cli::config::Overrides;
use polytd_cli::error::CliError;
use polytd_cli::{execute, Command, Invocation};

/// TD(0) experiments on polynomially mixing chains.
///
/// Exit codes: 0 success, 2 configuration error, 3 runtime error,
/// 4 a report line failed.
#[derive(Parser, Debug)]
#[command(name = "polytd", version)]
struct Cli {
    /// JSON experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Artifact directory (default: the config's `out_dir`, else `polytd-out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of seeds, overriding the config.
    #[arg(long, global = true)]
    seeds: Option<u64>,
    /// Steps per run, overriding the config.
    #[arg(long, global = true)]
    steps: Option<u64>,
    /// Worker threads; outputs do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Build the kernel, resolve seeds and sample the paths.
    Simulate,
    /// Fixed point and one TD run per seed.
    Train,
    /// Martingale/remainder decomposition of every run.
    Decompose,
    /// Exact mixing diagnostics of a kernel.
    Mixing {
        /// Kernel JSON; defaults to the artifact directory's kernel.
        #[arg(long)]
        kernel: Option<PathBuf>,
    },
    /// Maximal coupling from two start states.
    Couple,
    /// Cross-block covariance of stationary paths.
    Blocks,
    /// Activation-region crossings along ReLU runs.
    Crossings,
    /// Split-sample checks of the error quantile envelope.
    Rates,
    /// Summarise every stage present in the artifact directory.
    Report,
    /// Every enabled stage in order, then the report.
    Run {
        /// Stop after this stage.
        #[arg(long)]
        stage: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    let cmd = match cli.command {
        Sub::Simulate => Command::Simulate,
        Sub::Train => Command::Train,
        Sub::Decompose => Command::Decompose,
        Sub::Mixing { kernel } => Command::Mixing { kernel },
        Sub::Couple => Command::Couple,
        Sub::Blocks => Command::Blocks,
        Sub::Crossings => Command::Crossings,
        Sub::Rates => Command::Rates,
        Sub::Report => Command::Report,
        Sub::Run { stage } => Command::Run { stage },
    };
    let inv = Invocation { config: cli.config, out: cli.out, overrides: Overrides { n_seeds: cli.seeds, steps: cli.steps } };
    let result = execute(&cmd, &inv).and_then(|done| {
        if let Some(r) = &done.report {
            print!("{}", r.text());
            if r.failures() > 0 {
                return Err(CliError::AcceptanceFailed { failed: r.failures() });
            }
        }
        println!("artifacts in {} ({} files)", done.out.display(), done.manifest.files.len());
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
