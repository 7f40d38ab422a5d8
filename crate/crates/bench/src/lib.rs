//! Shared fixtures for the benchmarks.

use trajgen_core::geometry::Trajectory;
use trajgen_core::synth::{record_seed, sample_trajectory, SynthConfig};

/// `n` synthetic trajectories of `frames` poses, deterministic in `seed`.
pub fn trajectories(n: usize, frames: usize, seed: u64) -> Vec<Trajectory> {
    let cfg = SynthConfig { frames, ..SynthConfig::default() };
    (0..n as u64).map(|i| sample_trajectory(&cfg, record_seed(seed, i)).expect("valid synth config").trajectory).collect()
}
