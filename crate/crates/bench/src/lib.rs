//! Shared fixtures for the criterion benchmarks.

use swarmtraj::{DiscreteTrajectory, Model, ScenarioConfig, ScpSettings};

/// Demo model with `agents` quadrotors and the default SCP settings.
pub fn demo(agents: usize) -> (Model, ScpSettings) {
    let cfg = ScenarioConfig::demo(agents).expect("demo scenario is valid");
    (Model::new(&cfg), ScpSettings::default())
}

/// Hover-thrust inputs at the minimum final time, forward shot from the
/// initial state.
pub fn hover_guess(model: &Model, settings: &ScpSettings) -> DiscreteTrajectory {
    let grid = settings.grid().expect("valid grid");
    let cfg = model.config();
    let mut eta = nalgebra::DVector::zeros(model.dims().input());
    eta[model.dims().input() - 1] = cfg.time_min;
    let inputs = vec![eta; grid.intervals()];
    let (x0, _) = cfg.boundary_augmented_states();
    let states =
        swarmtraj::transcription::forward_shoot(model, &grid, &x0, &inputs, &settings.integrator)
            .expect("hover shot integrates");
    DiscreteTrajectory { states, inputs }
}
