use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use spectree::harness::{self, oracle_check, ExperimentConfig};

#[derive(Parser)]
#[command(name = "spectree", version, about = "Budget-aware speculative decoding tree planner and simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write cell, raw and summary CSVs.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Fit the static correction of a hardware profile to a latency trace.
    Calibrate {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pearson and Spearman correlation between surrogate and accepted length.
    Correlate {
        /// Any cycle CSV (a cell file or raw.csv).
        records: PathBuf,
    },
    /// Run the oracle bridge suite and the controller timing report.
    OracleCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        workers: Option<usize>,
    },
}

fn run(cli: Cli) -> spectree::Result<bool> {
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            workers,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(w) = workers {
                cfg.workers = w;
            }
            let res = harness::run_experiment(&cfg)?;
            println!("policy,alignment,trials,mean_speedup,mean_tau,mean_n");
            for r in &res.summary {
                println!(
                    "{},{},{},{:.4},{:.4},{:.2}",
                    r.policy, r.alignment, r.trials, r.mean_speedup, r.mean_tau, r.mean_n
                );
            }
            println!("raw: {}", res.raw_csv.display());
            println!("summary: {}", res.summary_csv.display());
            Ok(true)
        }
        Command::Calibrate { profile, trace, out } => {
            let report = harness::calibrate_files(&profile, &trace, out.as_deref())?;
            print!("{}", report.to_text());
            Ok(true)
        }
        Command::Correlate { records } => {
            let c = harness::correlate_file(&records)?;
            println!("cycles = {}\npearson = {}\nspearman = {}", c.cycles, c.pearson, c.spearman);
            Ok(true)
        }
        Command::OracleCheck { seed, workers } => {
            if let Some(w) = workers {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(w)
                    .build_global()
                    .map_err(|e| spectree::Error::InvalidArgument(e.to_string()))?;
            }
            let lines = oracle_check::run_oracle_suite(seed)?;
            for l in &lines {
                println!("{l}");
            }
            Ok(lines.iter().all(|l| l.passed))
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
