//! `srl` — run, validate, benchmark, and report on experiments.

mod bench;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use srl_core::control::controller::{run_experiment, RunError};
use srl_core::control::worker_main;
use srl_core::model::config::ExperimentConfig;
use srl_core::model::validate::validate;

#[derive(Parser)]
#[command(name = "srl", version, about = "Decoupled actor/policy/trainer RL runtime")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Validate a config and run the experiment to its stop condition.
    Run {
        /// Experiment config (TOML).
        config: PathBuf,
    },
    /// Check a config; prints the planned workers and streams.
    Validate { config: PathBuf },
    /// Throughput experiment harnesses.
    Bench {
        #[command(subcommand)]
        which: bench::BenchCmd,
    },
    /// Summarize a finished run directory (FPS tables, CSV export).
    Report {
        run_dir: PathBuf,
        /// Also write plot-ready CSV files next to the metrics.
        #[arg(long)]
        csv: bool,
    },
    /// Internal: worker process entry point.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        controller: String,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        index: u32,
    },
}

// Exit codes: 0 ok, 2 config error, 3 runtime failure.
fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Run { config } => {
            let cfg = load_config(&config)?;
            match run_experiment(&cfg) {
                Ok(report) => {
                    println!(
                        "experiment `{}` finished: {}",
                        report.experiment, report.stop_reason
                    );
                    println!("  run dir        {}", report.run_dir.display());
                    println!("  wall clock     {:.1}s", report.wall_clock_s);
                    println!("  frames trained {}", report.frames_trained);
                    println!("  fps            {:.1}", report.fps);
                    for (worker, state) in &report.worker_states {
                        println!("  {worker:<12} {state}");
                    }
                    if report.failures.is_empty() && report.all_exited() {
                        Ok(ExitCode::SUCCESS)
                    } else {
                        for f in &report.failures {
                            eprintln!("failure: {f}");
                        }
                        Ok(ExitCode::from(3))
                    }
                }
                Err(RunError::Config(errors)) => {
                    for e in errors {
                        eprintln!("config error: {e}");
                    }
                    Ok(ExitCode::from(2))
                }
                Err(RunError::Runtime(msg)) => {
                    eprintln!("runtime failure: {msg}");
                    Ok(ExitCode::from(3))
                }
            }
        }
        Cmd::Validate { config } => {
            let cfg = load_config(&config)?;
            match validate(&cfg) {
                Ok(plan) => {
                    println!(
                        "ok: {} workers, {} streams",
                        plan.workers.len(),
                        plan.streams.len()
                    );
                    for w in &plan.workers {
                        println!("  worker {:<12} slot {}", w.ident(), w.slot);
                    }
                    for s in &plan.streams {
                        println!(
                            "  stream {:<12} {:?}/{:?} endpoints={}",
                            s.name, s.kind, s.transport, s.servers
                        );
                    }
                    Ok(ExitCode::SUCCESS)
                }
                Err(errors) => {
                    for e in errors {
                        eprintln!("config error: {e}");
                    }
                    Ok(ExitCode::from(2))
                }
            }
        }
        Cmd::Bench { which } => bench::run(which),
        Cmd::Report { run_dir, csv } => report::run(&run_dir, csv),
        Cmd::Worker {
            controller,
            kind,
            index,
        } => {
            let addr = controller
                .parse()
                .with_context(|| format!("bad controller address `{controller}`"))?;
            match worker_main(addr, &kind, index) {
                Ok(()) => Ok(ExitCode::SUCCESS),
                Err(e) => {
                    eprintln!("worker {kind}:{index}: {e}");
                    Ok(ExitCode::from(3))
                }
            }
        }
    }
}

fn load_config(path: &PathBuf) -> anyhow::Result<ExperimentConfig> {
    ExperimentConfig::from_toml_file(path).map_err(|e| anyhow::anyhow!(e))
}
