//! Fixtures shared by the benchmarks.

use maneuver_core::traffic_sim::{generate_scenario, simulate};
use maneuver_core::{SceneSequence, WorldConfig};

/// A simulated default-preset sequence.
pub fn sample_sequence(seed: u64) -> SceneSequence {
    let scenario = generate_scenario(&[1.0 / 6.0; 6], &WorldConfig::default(), seed).expect("default config is valid");
    simulate(&scenario).expect("scenario simulates")
}
