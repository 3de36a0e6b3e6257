//! `fednl` command line: run experiments, compare runs, dump datasets and
//! check gradients.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fednl_core::experiment::{self, ExperimentConfig};
use fednl_core::Error;

#[derive(Parser)]
#[command(name = "fednl", version, about = "Federated delta-rule memory experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every arm of an experiment config.
    Run {
        config: PathBuf,
        /// Run arms in parallel.
        #[arg(long)]
        concurrent_arms: bool,
    },
    /// Tabulate finished runs (experiment roots or arm directories).
    Compare {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the CSV tables here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured datasets as JSONL without training.
    GenData { config: PathBuf },
    /// Finite-difference check of the analytic gradients.
    GradCheck {
        config: PathBuf,
        /// Length of the checked sequence.
        #[arg(long, default_value_t = 24)]
        tokens: usize,
        /// Fail when the worst relative error exceeds this.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        Error::Config { .. } | Error::Json(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run { config, concurrent_arms } => {
            let cfg = ExperimentConfig::load(&config)?;
            let root = cfg.output_root();
            let outcomes = experiment::run_experiment(&cfg, &root, concurrent_arms)?;
            for o in &outcomes {
                let last = o.reports.last().expect("at least one round");
                let summary: Vec<String> = last.eval.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
                println!("{}: {} rounds, {} bytes, {}", o.arm, o.reports.len(), last.cumulative_bytes, summary.join(" "));
            }
            println!("outputs in {}", root.display());
        }
        Command::Compare { dirs, out } => {
            let c = experiment::compare_arms(&dirs)?;
            println!("{}", c.accuracy_csv);
            println!("{}", c.depth_csv);
            println!("{}", c.communication_csv);
            if let Some(out) = out {
                c.write(&out)?;
                println!("tables written to {}", out.display());
            }
        }
        Command::GenData { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            for p in experiment::gen_data(&cfg, &cfg.output_root())? {
                println!("{}", p.display());
            }
        }
        Command::GradCheck { config, tokens, tolerance } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = experiment::grad_check_config(&cfg, tokens)?;
            println!(
                "coordinates={} max_rel_error={:.3e} worst_index={}",
                r.coordinates, r.max_rel_error, r.worst_index
            );
            if r.max_rel_error > tolerance {
                eprintln!("gradient check failed: {:.3e} > {tolerance:.1e}", r.max_rel_error);
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => fail(&e),
    }
}
