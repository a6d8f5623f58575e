//! `opl`: experiment runner for two-stage off-policy learning sweeps.

use clap::{Parser, Subcommand};
use opl_core::experiment::{
    cmd_gradcheck, cmd_init, cmd_run, cmd_summarize, cmd_verify, default_out_dir,
    ExperimentConfig, Method,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "opl", version, about = "Off-policy learning experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a documented configuration template.
    Init {
        /// Destination path for the template.
        #[arg(long, default_value = "experiment.toml")]
        config: PathBuf,
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Run the sweep described by a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for results.csv and summary.csv
        /// (default: $OPL_OUT_DIR, else ./results).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the number of seeds per swept value.
        #[arg(long)]
        seeds: Option<usize>,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
        /// Override the method list, comma-separated
        /// (potec, reg_based, ips, dr, sips, potec1).
        #[arg(long, value_delimiter = ',')]
        method: Option<Vec<Method>>,
    },
    /// Recompute the summary from an existing results.csv.
    Summarize {
        /// Path to results.csv.
        #[arg(long)]
        results: PathBuf,
        /// Where to write summary.csv (default: print to stdout only).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the estimator/oracle self-verification battery.
    Verify,
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

fn run() -> Result<ExitCode, opl_core::OplError> {
    match Cli::parse().command {
        Command::Init { config, force } => {
            cmd_init(&config, force)?;
            println!("wrote {}", config.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            out,
            seeds,
            jobs,
            method,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(n) = seeds {
                cfg.sweep.n_seeds = n;
            }
            if let Some(list) = method {
                cfg.methods.list = list;
            }
            cfg.validate()?;
            let out_dir = out.unwrap_or_else(default_out_dir);
            let rows = cmd_run(&cfg, &out_dir, jobs)?;
            let failed: Vec<_> = rows.iter().filter(|r| r.error.is_some()).collect();
            println!(
                "{} of {} cells succeeded; results in {}",
                rows.len() - failed.len(),
                rows.len(),
                out_dir.display()
            );
            for r in &failed {
                eprintln!(
                    "FAILED {} {}={} seed {}: {}",
                    r.method,
                    cfg.sweep.param,
                    r.swept_value,
                    r.seed,
                    r.error.as_deref().unwrap_or("")
                );
            }
            Ok(if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Summarize { results, out } => {
            let summary = cmd_summarize(&results, out.as_deref())?;
            println!("method,swept_value,n_runs,mean_normalized,ci_lower,ci_upper");
            for s in &summary {
                println!(
                    "{},{},{},{:.6},{:.6},{:.6}",
                    s.method, s.swept_value, s.n_runs, s.mean_normalized, s.ci_lower, s.ci_upper
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify => {
            let checks = cmd_verify();
            let mut ok = true;
            for c in &checks {
                println!("[{}] {}", if c.passed { "PASS" } else { "FAIL" }, c.name);
                for line in c.detail.lines() {
                    println!("       {line}");
                }
                ok &= c.passed;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Gradcheck { seed, cases } => {
            let report = cmd_gradcheck(seed, cases)?;
            println!(
                "[{}] {} cases, max relative error {:.3e} (tolerance {:.0e})",
                if report.passed { "PASS" } else { "FAIL" },
                report.n_cases,
                report.max_relative_error,
                report.tolerance
            );
            Ok(if report.passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
