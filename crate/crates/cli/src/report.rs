//! The `srl report` subcommand: FPS tables and CSV export from a run
//! directory's metrics files.

use std::path::Path;
use std::process::ExitCode;

use srl_core::control::metrics::{aggregate_fps, fps_between, read_all_metrics};

pub fn run(run_dir: &Path, csv: bool) -> anyhow::Result<ExitCode> {
    let all = read_all_metrics(run_dir);
    if all.is_empty() {
        eprintln!("no metrics found under {}", run_dir.display());
        return Ok(ExitCode::from(2));
    }

    let (fps, frames, duration) = aggregate_fps(&all);
    println!("run {}", run_dir.display());
    println!("  frames trained {frames}");
    println!("  duration       {duration:.1}s");
    println!("  aggregate fps  {fps:.1}");

    println!("{:>14} {:>12} {:>12} {:>12}", "worker", "fps", "frames", "drops");
    for (worker, records) in &all {
        let last = records.last().unwrap();
        if worker.starts_with("trainer") {
            println!(
                "{:>14} {:>12.1} {:>12} {:>12}",
                worker,
                fps_between(records, "frames_trained"),
                last.counters.get("frames_trained").unwrap_or(&0),
                last.counters.get("buffer_drops").unwrap_or(&0),
            );
        } else if worker.starts_with("actor") {
            println!(
                "{:>14} {:>12.1} {:>12} {:>12}",
                worker,
                fps_between(records, "frames_posted"),
                last.counters.get("frames_posted").unwrap_or(&0),
                last.counters.get("post_drops").unwrap_or(&0),
            );
        } else {
            println!("{:>14} {:>12} {:>12} {:>12}", worker, "-", "-", "-");
        }
    }

    if csv {
        let mut out = String::from("worker,unix_ms,counter,value\n");
        for (worker, records) in &all {
            for r in records {
                for (k, v) in &r.counters {
                    out.push_str(&format!("{worker},{},{k},{v}\n", r.unix_ms));
                }
            }
        }
        let path = run_dir.join("metrics.csv");
        std::fs::write(&path, out)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}
