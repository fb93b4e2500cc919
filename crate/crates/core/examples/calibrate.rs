//! Pilot runs behind the thresholds of the probabilistic acceptance checks.
//!
//! ```text
//! cargo run --release --example calibrate [n_seeds]
//! ```
//!
//! Prints, for each pilot seed, the per-scale median and 90th percentile of
//! the sup-distance on the two-level set, and the equilibrium time-average on
//! the one-level set. The committed numbers live in CALIBRATION.md.

use std::time::Instant;

use lob_fluid::harness::{equilibrium_study, scaling_study, sup_distance_run, Init, StudyConfig};
use lob_fluid::{ModelParams, RngStream, ScalingConfig};

const PILOT_SEEDS: [u64; 5] = [20_261_016, 1, 2, 3, 4];

fn main() {
    let n_seeds: usize = std::env::args()
        .nth(1)
        .map(|s| s.parse().expect("n_seeds must be an integer"))
        .unwrap_or(PILOT_SEEDS.len())
        .min(PILOT_SEEDS.len());
    let two_level = ModelParams::new(2, 1.0, 1.0, 1.0, 2.0, 1.0).unwrap();
    let one_level = ModelParams::new(1, 1.0, 0.5, 0.5, 2.0, 1.0).unwrap();

    println!("# sup-distance study: N=2, gamma=1, alpha=(1,1), lambda=(2,1), T=10, 50 replicas");
    println!("seed,L,median,p90,slope");
    for &seed in &PILOT_SEEDS[..n_seeds] {
        let clock = Instant::now();
        let cfg = StudyConfig::new(two_level, vec![1e2, 1e3, 1e4], 50, 10.0, Init::FixedPoint, seed);
        let out = scaling_study(&cfg).expect("study runs");
        for s in &out.summary {
            println!(
                "{seed},{},{:.5},{:.5},{:.4}",
                s.scale,
                s.median,
                s.p90,
                out.log_log_slope.unwrap_or(f64::NAN)
            );
        }
        eprintln!("seed {seed}: {:.1}s", clock.elapsed().as_secs_f64());
    }

    println!("# equilibrium: N=1, lambda=(2,1), L=1e4, burn-in 50L, 1000 samples, gap 100");
    println!("seed,mean_x,mean_y,se_x,se_y,distance");
    for &seed in &PILOT_SEEDS[..n_seeds] {
        let stats = equilibrium_study(
            &one_level,
            &ScalingConfig::new(1e4),
            500_000,
            1000,
            100,
            RngStream::new(seed, 0),
        )
        .expect("equilibrium runs");
        println!(
            "{seed},{:.5},{:.5},{:.5},{:.5},{:.5}",
            stats.mean.x[0], stats.mean.y[0], stats.std_err.x[0], stats.std_err.y[0],
            stats.distance_to_fixed_point
        );
    }

    println!("# single run: N=1, lambda=(2,1), L=1e6, T=1, fixed-point start");
    println!("seed,sup_dist");
    for &seed in &PILOT_SEEDS[..n_seeds] {
        let d = sup_distance_run(
            &one_level,
            &ScalingConfig::new(1e6),
            &Init::FixedPoint,
            1.0,
            0.01,
            RngStream::new(seed, 0),
        )
        .expect("run succeeds");
        println!("{seed},{d:.5}");
    }
}
