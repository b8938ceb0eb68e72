//! Benchmark fixtures.

use mfbdsde_core::{preset, sample_ensemble, Preset, ScenarioEnsemble, TimeGrid};

/// A preset with the ensemble its benchmark runs on.
pub fn fixture(name: &str, steps: usize, particles: (usize, usize)) -> (Preset, ScenarioEnsemble) {
    let p = preset(name).expect("known preset");
    let grid = TimeGrid::horizon(p.horizon, steps).expect("valid grid");
    let ens = sample_ensemble(grid, particles.0, particles.1, 7).expect("valid ensemble");
    (p, ens)
}
