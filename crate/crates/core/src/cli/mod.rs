//! Command-line front end: `run`, `verify` and `export`.
//!
//! Exit codes: 0 on success, 1 when a property check fails or a run hits a
//! runtime error, 2 on invalid arguments or configuration.

pub mod config;
pub mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::checks::{run_suite, SuiteConfig};
use crate::error::{Error, Result};

pub use config::{ExportConfig, Mode, Overrides, RunConfig, SeedList};
pub use run::{export, output_dir, run, run_seed, Dispersion, SeedRun, SeedSummary, OUTPUT_ROOT_ENV};

#[derive(Debug, Parser)]
#[command(name = "prompt-ot", version, about = "Transport-refined multi-prompt score maps on planted segmentation scenes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train and evaluate on each seed; write metrics and artifacts.
    Run {
        #[command(flatten)]
        overrides: Overrides,
        /// Output directory (default: $PROMPT_OT_OUTPUT_ROOT/<config name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Run the numerical property checks and print one line per check.
    Verify {
        #[command(flatten)]
        overrides: Overrides,
        /// Relative-error tolerance of the gradient checks.
        #[arg(long, allow_hyphen_values = true)]
        grad_tol: Option<f64>,
        /// Random instances per check.
        #[arg(long)]
        instances: Option<u64>,
    },
    /// Write scenes and per-prompt score maps without training.
    Export {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
        /// Parameters to adapt the embeddings with before scoring.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

fn run_name(o: &Overrides, fallback: &str) -> String {
    o.config
        .as_ref()
        .and_then(|p| p.file_stem())
        .map_or_else(|| fallback.to_string(), |s| s.to_string_lossy().into_owned())
}

fn print_metrics(rows: &[SeedSummary]) {
    println!("{:>6}  {:<9} {:>9} {:>9} {:>9}", "seed", "path", "mIoU(S)", "mIoU(U)", "hIoU");
    for r in rows {
        for (name, m) in [("decoder", &r.decoder), ("scoremap", &r.scoremap), ("ensemble", &r.ensemble)] {
            println!("{:>6}  {:<9} {:>9.4} {:>9.4} {:>9.4}", r.seed, name, m.miou_seen, m.miou_unseen, m.hiou);
        }
    }
}

/// Runs a parsed command. `Ok(false)` means the command completed but a
/// check failed.
pub fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::Run { overrides, out, force } => {
            let cfg = overrides.resolve()?;
            let target = output_dir(out.as_deref(), &run_name(overrides, "run"));
            let (dir, rows) = run(&cfg, &target, *force)?;
            print_metrics(&rows);
            println!("wrote {}", dir.display());
            Ok(rows.iter().all(|r| r.gt_reads_during_training == 0))
        }
        Command::Verify { overrides, grad_tol, instances } => {
            let cfg = overrides.resolve()?;
            let mut suite = SuiteConfig {
                scene: cfg.scene.clone(),
                model: cfg.model,
                ..SuiteConfig::default()
            };
            if let Some(t) = *grad_tol {
                if !(t > 0.0 && t.is_finite()) {
                    return Err(Error::config("grad_tol", "must be positive and finite"));
                }
                suite.grad_tol = t;
                suite.loss_grad_tol = t;
            }
            if let Some(n) = *instances {
                if n == 0 {
                    return Err(Error::config("instances", "must be positive"));
                }
                suite.seeds = n;
            }
            let outcomes = run_suite(&suite)?;
            for o in &outcomes {
                println!("{}", o.line());
            }
            let passed = outcomes.iter().filter(|o| o.passed).count();
            println!("{passed}/{} checks passed", outcomes.len());
            Ok(passed == outcomes.len())
        }
        Command::Export { overrides, out, force, checkpoint } => {
            let cfg = overrides.resolve()?;
            let target = output_dir(out.as_deref(), &format!("{}-export", run_name(overrides, "scenes")));
            let (dir, rows) = export(&cfg, &target, *force, checkpoint.as_deref())?;
            for r in &rows {
                let d = r.dispersion;
                println!(
                    "seed {:>4}  prompt correlation raw {:.4} transport {:.4} softmax {:.4}",
                    r.seed, d.raw_correlation, d.transport_correlation, d.softmax_correlation
                );
            }
            println!("wrote {}", dir.display());
            Ok(true)
        }
    }
}

/// Parses `std::env::args`, executes and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
