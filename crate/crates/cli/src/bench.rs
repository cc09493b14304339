//! The `srl bench` subcommands: the throughput harnesses with table output
//! and optional CSV export.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::Subcommand;

use srl_core::harness::{prefetch, ring, saturation, spmd};

#[derive(Subcommand)]
pub enum BenchCmd {
    /// Actor throughput vs environment-ring size.
    Ring {
        /// Ring sizes to sweep.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        rings: Vec<usize>,
        #[arg(long, default_value_t = 2_000)]
        env_step_us: u64,
        #[arg(long, default_value_t = 10_000)]
        inference_delay_us: u64,
        #[arg(long, default_value_t = 3.0)]
        measure_s: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Trainer FPS and sample utilization vs number of actors.
    Saturation {
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32")]
        actors: Vec<usize>,
        #[arg(long, default_value_t = 4_000)]
        env_step_us: u64,
        #[arg(long, default_value_t = 64_000)]
        train_step_us: u64,
        #[arg(long, default_value_t = 4.0)]
        measure_s: f64,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Batch staging overlap: step rate with prefetch on vs off.
    Prefetch {
        #[arg(long, default_value_t = 5_000)]
        load_us: u64,
        #[arg(long, default_value_t = 5_000)]
        step_us: u64,
        #[arg(long, default_value_t = 120)]
        batches: u64,
    },
    /// Data-parallel equivalence: K trainers vs one with a K-times batch.
    Spmd {
        #[arg(long, default_value_t = 4)]
        members: u32,
        #[arg(long, default_value_t = 8)]
        batch: u32,
        #[arg(long, default_value_t = 100)]
        steps: u64,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
}

pub fn run(cmd: BenchCmd) -> anyhow::Result<ExitCode> {
    match cmd {
        BenchCmd::Ring {
            rings,
            env_step_us,
            inference_delay_us,
            measure_s,
            csv,
        } => {
            let params = ring::RingBenchParams {
                ring_sizes: rings,
                env_step_us,
                inference_delay_us,
                warmup: Duration::from_millis(1_500),
                measure: Duration::from_secs_f64(measure_s),
            };
            let points = ring::run(&params);
            println!("{:>5} {:>12} {:>12} {:>7}", "ring", "steps/s", "model", "ratio");
            for p in &points {
                println!(
                    "{:>5} {:>12.1} {:>12.1} {:>7.2}",
                    p.ring, p.steps_per_sec, p.predicted, p.ratio
                );
            }
            if let Some(path) = csv {
                let mut out = String::from("ring,steps_per_sec,predicted,ratio\n");
                for p in &points {
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        p.ring, p.steps_per_sec, p.predicted, p.ratio
                    ));
                }
                std::fs::write(&path, out)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        BenchCmd::Saturation {
            actors,
            env_step_us,
            train_step_us,
            measure_s,
            csv,
        } => {
            let params = saturation::SaturationParams {
                actor_counts: actors,
                env_step_us,
                train_step_us,
                measure: Duration::from_secs_f64(measure_s),
                ..Default::default()
            };
            println!(
                "per-actor rate {:.0} frames/s, trainer capacity {:.0} frames/s",
                params.per_actor_rate(),
                params.trainer_capacity()
            );
            let points = saturation::run(&params);
            println!(
                "{:>7} {:>14} {:>14} {:>12}",
                "actors", "trainer fps", "produced fps", "utilization"
            );
            for p in &points {
                println!(
                    "{:>7} {:>14.1} {:>14.1} {:>11.1}%",
                    p.actors,
                    p.trainer_fps,
                    p.produced_fps,
                    p.utilization * 100.0
                );
            }
            if let Some(n) = saturation::saturating_actor_count(&points) {
                println!("saturates around {n} actors");
            }
            if let Some(path) = csv {
                let mut out = String::from("actors,trainer_fps,produced_fps,utilization\n");
                for p in &points {
                    out.push_str(&format!(
                        "{},{},{},{}\n",
                        p.actors, p.trainer_fps, p.produced_fps, p.utilization
                    ));
                }
                std::fs::write(&path, out)?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        BenchCmd::Prefetch {
            load_us,
            step_us,
            batches,
        } => {
            let r = prefetch::run(&prefetch::PrefetchParams {
                load_us,
                step_us,
                batches,
                warmup_batches: 8,
            });
            println!("prefetch off {:>8.1} batches/s", r.off_rate);
            println!("prefetch on  {:>8.1} batches/s", r.on_rate);
            println!(
                "speedup      {:>8.2}x (pipeline model: {:.2}x)",
                r.speedup, r.ideal_speedup
            );
            Ok(ExitCode::SUCCESS)
        }
        BenchCmd::Spmd {
            members,
            batch,
            steps,
            seed,
        } => {
            let r = spmd::run(&spmd::SpmdParams {
                members,
                per_member_batch: batch,
                steps,
                trajectory_len: 4,
                seed,
            });
            println!(
                "{} members x batch {} vs single trainer x batch {}",
                members,
                batch,
                members * batch
            );
            println!("steps compared      {}", r.steps);
            println!("members identical   {}", r.members_identical);
            println!("max relative error  {:.3e}", r.max_rel_err);
            Ok(ExitCode::SUCCESS)
        }
    }
}
