//! Shared fixtures for the benchmarks.

use mediation_core::sim::{default_scenario, simulate};
use mediation_core::{Dataset, ScenarioConfig, Seed};

/// The default scenario resized to `n` units.
pub fn scenario(n: u64) -> ScenarioConfig {
    ScenarioConfig {
        n_units: n,
        ..default_scenario()
    }
}

/// A dataset of `n` units simulated from the default scenario.
pub fn dataset(n: u64) -> Dataset {
    simulate(&scenario(n), Seed(1)).expect("default scenario simulates")
}
