//! Forward-backward particle engine: time and space grids, common noise,
//! particle flows, the backward expectation update and the Picard fixed
//! point on one window, plus the linearized systems built on a converged
//! window.

mod field;
mod forward;
mod grid;
mod linearized;
mod noise;
mod picard;
mod standard;

pub use field::{DecouplingField, TerminalData};
pub use forward::{
    backward_expectation_update, characteristic_path, characteristic_value, effective_scenarios,
    simulate_forward, ScenarioFlow,
};
pub use grid::{GridFn, SpatialGrid, TimeGrid};
pub use linearized::{
    solve_discrete_nabla_mu, solve_linearized_mkv, solve_linearized_state, solve_nabla_mu,
    LinearContext, LinearizedParams, PopulationResponse, TangentState,
};
pub use noise::{NoiseBundle, NoiseWindow};
pub use picard::{
    picard_solve, BoundaryLink, PicardDiagnostics, PicardParams, PicardSolution, TerminalSpec,
    WindowProblem,
};
pub use standard::{
    control_cost, noise_path, optimal_control, optimal_running_cost, reconstruct_z0,
    standard_system_gradient, value_along_noise, Control,
};
