//! Throughput of batched vehicle stepping.

use std::time::Instant;

use driftsim::dynamics::{step, step_batch, BatchModel, ControlInput, Disturbance, TireParams, VehicleState};
use driftsim::io::{sha256_hex, to_json_pretty, DirLock, RunConfig};
use driftsim::seeding;
use rand::Rng;
use serde::Serialize;

use crate::{Cli, CliError};

#[derive(Debug, Clone, Serialize)]
struct Measurement {
    instances: usize,
    workers: usize,
    steps: usize,
    seconds: f64,
    /// `None` when the run was too short to time.
    vehicle_steps_per_sec: Option<f64>,
}

#[derive(Debug, Serialize)]
struct BenchReport {
    measurements: Vec<Measurement>,
    /// Final-state hash of the batched run equals that of a per-instance loop.
    batch_matches_sequential: bool,
    batch_hash: String,
    /// Throughput of the largest batch over a single instance, per worker count.
    speedup_largest_over_single: Vec<(usize, Option<f64>)>,
}

fn random_batch(n: usize, seed: u64) -> (Vec<VehicleState>, Vec<ControlInput>) {
    let mut rng = seeding::rng_for(seed, seeding::STREAM_BENCH, n as u64);
    let mut states = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n);
    for _ in 0..n {
        states.push(VehicleState::from_pose_and_motion(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(-3.1..3.1),
            rng.random_range(-2.0..2.0),
            rng.random_range(-0.8..0.8),
            rng.random_range(0.5..3.0),
        ));
        let v = rng.random_range(1.0..5.0) / 0.0565;
        inputs.push(ControlInput {
            delta: rng.random_range(-0.4..0.4),
            omega: [v; 4],
        });
    }
    (states, inputs)
}

fn state_hash(states: &[VehicleState]) -> String {
    let bytes: Vec<u8> = states
        .iter()
        .flat_map(|s| s.as_array())
        .flat_map(f64::to_le_bytes)
        .collect();
    sha256_hex(&bytes)
}

pub fn cmd_bench(cli: &Cli, cfg: &RunConfig, steps: usize, instances: &[usize]) -> Result<(), CliError> {
    if instances.is_empty() || instances.contains(&0) {
        return Err(CliError::usage("--instances must list positive batch sizes"));
    }
    let _lock = DirLock::acquire(&cli.out)?;
    let tires = [TireParams::default()];
    let dist = [Disturbance::zero()];
    let model = BatchModel {
        params: std::slice::from_ref(&cfg.vehicle),
        tires: &tires,
        disturbances: &dist,
    };
    let dt = cfg.env.dt;
    let max_workers = rayon::current_num_threads();
    let mut worker_counts = vec![1];
    if max_workers > 1 {
        worker_counts.push(max_workers);
    }
    let mut measurements = Vec::new();
    for &workers in &worker_counts {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| CliError::runtime(e.to_string()))?;
        for &n in instances {
            let (mut states, inputs) = random_batch(n, cfg.run.seed);
            let t0 = Instant::now();
            pool.install(|| {
                for _ in 0..steps {
                    step_batch(&mut states, &inputs, model, dt);
                }
            });
            let seconds = t0.elapsed().as_secs_f64();
            let rate = (steps > 0 && seconds > 0.0).then(|| (n * steps) as f64 / seconds);
            if !cli.quiet {
                match rate {
                    Some(r) => eprintln!("{n:>6} instances, {workers:>2} workers: {r:>12.0} vehicle-steps/s"),
                    None => eprintln!("{n:>6} instances, {workers:>2} workers: n/a"),
                }
            }
            measurements.push(Measurement {
                instances: n,
                workers,
                steps,
                seconds,
                vehicle_steps_per_sec: rate,
            });
        }
    }
    // Correctness under timing: batched and per-instance stepping agree bitwise.
    let n_check = 1024;
    let (mut batch, inputs) = random_batch(n_check, cfg.run.seed);
    let mut seq = batch.clone();
    for _ in 0..steps.min(50) {
        step_batch(&mut batch, &inputs, model, dt);
        for (s, u) in seq.iter_mut().zip(&inputs) {
            *s = step(s, u, &cfg.vehicle, &tires[0], &dist[0], dt);
        }
    }
    let batch_hash = state_hash(&batch);
    let largest = *instances.iter().max().expect("nonempty");
    let smallest = *instances.iter().min().expect("nonempty");
    let speedups = worker_counts
        .iter()
        .map(|&w| {
            let rate = |n: usize| {
                measurements
                    .iter()
                    .find(|m| m.workers == w && m.instances == n)
                    .and_then(|m| m.vehicle_steps_per_sec)
            };
            (w, rate(largest).zip(rate(smallest)).map(|(a, b)| a / b))
        })
        .collect();
    let report = BenchReport {
        batch_matches_sequential: batch_hash == state_hash(&seq),
        batch_hash,
        measurements,
        speedup_largest_over_single: speedups,
    };
    let mut csv = String::from("instances,workers,steps,seconds,vehicle_steps_per_sec\n");
    for m in &report.measurements {
        csv.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            m.instances,
            m.workers,
            m.steps,
            m.seconds,
            m.vehicle_steps_per_sec.map_or("n/a".to_string(), |r| format!("{r:.0}"))
        ));
    }
    std::fs::create_dir_all(&cli.out)?;
    driftsim::io::write_atomic(&cli.out.join("bench.csv"), csv.as_bytes())?;
    driftsim::io::write_atomic(&cli.out.join("bench.json"), to_json_pretty(&report).as_bytes())?;
    if !report.batch_matches_sequential {
        return Err(CliError::runtime(
            "batched stepping diverged from the per-instance loop",
        ));
    }
    Ok(())
}
