//! Multiagent quadrotor trajectory optimization with continuous-time
//! constraint satisfaction.
//!
//! Path constraints are folded into an auxiliary integral state whose final
//! value must stay below a small relaxation, the free final time is handled
//! by a time-dilation input, and the resulting nonlinear program is solved by
//! a prox-linear sequential convex programming loop. A constraint-aware
//! particle filter produces warm-start trajectories for that loop.
//!
//! Module map:
//!
//! - [`scenario`]: problem parameters, validation, JSON I/O.
//! - [`dynamics`]: agent dynamics, constraint stacks, augmented dynamics and
//!   their Jacobians.
//! - [`integrator`]: adaptive Dormand–Prince integration of the state and of
//!   the variational equations.
//! - [`transcription`]: the normalized-time grid, shooting maps,
//!   linearizations and post-processing metrics.
//! - [`qp`]: operator-splitting convex QP solver.
//! - [`scp`]: the prox-linear loop.
//! - [`warmstart`]: unscented transform, particle filter, particle selection.
//! - [`harness`]: trials, Monte Carlo aggregation and artifact writers.

pub mod dynamics;
pub mod error;
pub mod harness;
pub mod integrator;
pub mod linalg;
pub mod qp;
pub mod scenario;
pub mod scp;
pub mod transcription;
pub mod warmstart;

pub use dynamics::{AgentState, Model, SelectorMatrices};
pub use error::{Error, Result};
pub use harness::{BenchmarkSpec, InitMode, RunReport, RunSettings};
pub use integrator::{IntegratorSettings, SensitivityBundle};
pub use qp::{QpProblem, QpSettings, QpSolution, QpStatus};
pub use scenario::{DerivedWeights, Dims, ScenarioConfig};
pub use scp::{ScpOutcome, ScpSettings, SubproblemSolution};
pub use transcription::{DiscreteTrajectory, Grid, LinearizedStep, SolveReport};
pub use warmstart::{DualityModel, FilterSettings, ParticleEnsemble, UtSettings};
