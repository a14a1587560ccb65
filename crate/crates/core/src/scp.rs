//! Prox-linear sequential convex programming.
//!
//! Each iteration linearizes the shooting maps around the current reference,
//! solves a convex QP with exact-penalty slacks on the dynamics defects and a
//! proximal term on the deviation from the reference, and moves to its
//! solution.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Model;
use crate::error::{Error, Result};
use crate::integrator::IntegratorSettings;
use crate::qp::{self, QpMethod, QpProblem, QpSettings, QpStatus};
use crate::transcription::{
    self, DiscreteTrajectory, Grid, HistoryEntry, LinearizedStep, SolveReport,
};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScpSettings {
    /// Exact-penalty weight on the slacks.
    pub beta: f64,
    /// Proximal step size; the prox weight is `1 / (2ρ)`.
    pub rho: f64,
    /// Relaxation of the terminal constraint-violation state.
    pub gamma: f64,
    pub max_iterations: usize,
    /// Absolute squared-displacement tolerance.
    pub tolerance: f64,
    /// Wall-clock budget in seconds; `None` means unlimited.
    pub budget_s: Option<f64>,
    pub nodes: usize,
    pub integrator: IntegratorSettings,
    pub qp: QpSettings,
    /// Warm-start each QP from the previous primal/dual pair.
    pub qp_warm_start: bool,
}

impl Default for ScpSettings {
    fn default() -> Self {
        Self {
            beta: 20.0,
            rho: 0.1,
            gamma: 1e-6,
            max_iterations: 1000,
            tolerance: 1e-6,
            budget_s: None,
            nodes: 8,
            integrator: IntegratorSettings::default(),
            qp: QpSettings {
                method: QpMethod::InteriorPoint,
                ..QpSettings::default()
            },
            qp_warm_start: true,
        }
    }
}

impl ScpSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Validation("beta must be > 0".into()));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Validation("rho must be > 0".into()));
        }
        if self.rho < 1.0 / self.beta {
            return Err(Error::Validation(format!(
                "rho must be >= 1/beta (rho = {}, 1/beta = {})",
                self.rho,
                1.0 / self.beta
            )));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Validation("gamma must be > 0".into()));
        }
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::Validation("tolerance must be >= 0".into()));
        }
        if let Some(b) = self.budget_s {
            if !(b > 0.0) {
                return Err(Error::Validation("budget must be > 0".into()));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::Validation("max_iterations must be >= 1".into()));
        }
        if self.nodes < 2 {
            return Err(Error::Validation("N must be >= 2".into()));
        }
        self.integrator.validate()?;
        self.qp.validate()
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.nodes)
    }
}

/// Offsets of the blocks in the stacked decision vector
/// `(ξ_{1:N}, η_{1:N-1}, q_{1:N-1}, z_{1:N-1})`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub nodes: usize,
    pub state: usize,
    pub input: usize,
}

impl Layout {
    pub fn new(model: &Model, grid: &Grid) -> Self {
        Self {
            nodes: grid.nodes(),
            state: model.dims().state(),
            input: model.dims().input(),
        }
    }

    pub fn xi(&self, k: usize) -> usize {
        k * self.state
    }

    pub fn eta(&self, k: usize) -> usize {
        self.nodes * self.state + k * self.input
    }

    pub fn q(&self, k: usize) -> usize {
        self.eta(self.nodes - 1) + k * self.state
    }

    pub fn z(&self, k: usize) -> usize {
        self.q(self.nodes - 1) + k * self.state
    }

    pub fn len(&self) -> usize {
        self.z(self.nodes - 1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds the convex subproblem around `reference`.
pub fn assemble_subproblem(
    model: &Model,
    grid: &Grid,
    steps: &[LinearizedStep],
    reference: &DiscreteTrajectory,
    settings: &ScpSettings,
) -> Result<QpProblem> {
    reference.check(model, grid)?;
    if steps.len() != grid.intervals() {
        return Err(Error::Dimension(format!(
            "{} linearizations for {} intervals",
            steps.len(),
            grid.intervals()
        )));
    }
    let lay = Layout::new(model, grid);
    let (ns, nu, nn) = (lay.state, lay.input, lay.nodes);
    let d = model.dims();
    for s in steps {
        if s.a.shape() != (ns, ns) || s.b.shape() != (ns, nu) || s.c.len() != ns {
            return Err(Error::Dimension("linearization block shapes".into()));
        }
    }
    let n = lay.len();
    let inv_rho = 1.0 / settings.rho;

    let mut p = DMatrix::zeros(n, n);
    let mut q = DVector::zeros(n);
    for k in 0..nn {
        for i in 0..ns {
            let j = lay.xi(k) + i;
            p[(j, j)] = inv_rho;
            q[j] = -inv_rho * reference.states[k][i];
        }
    }
    for k in 0..nn - 1 {
        for i in 0..nu {
            let j = lay.eta(k) + i;
            p[(j, j)] = inv_rho;
            q[j] = -inv_rho * reference.inputs[k][i];
        }
        for i in 0..ns {
            q[lay.q(k) + i] = settings.beta;
            q[lay.z(k) + i] = settings.beta;
        }
    }
    q[lay.xi(nn - 1) + d.w_index()] += 1.0;

    let rows = (nn - 1) * ns + ns + d.nx + (nn - 1) + (nn - 1) * nu + 2 * (nn - 1) * ns;
    let mut a = DMatrix::zeros(rows, n);
    let mut l = DVector::zeros(rows);
    let mut u = DVector::zeros(rows);
    let mut r = 0;
    for (k, st) in steps.iter().enumerate() {
        for i in 0..ns {
            a[(r + i, lay.xi(k + 1) + i)] = 1.0;
            for j in 0..ns {
                a[(r + i, lay.xi(k) + j)] = -st.a[(i, j)];
            }
            for j in 0..nu {
                a[(r + i, lay.eta(k) + j)] = -st.b[(i, j)];
            }
            a[(r + i, lay.q(k) + i)] = -1.0;
            a[(r + i, lay.z(k) + i)] = 1.0;
            l[r + i] = st.c[i];
            u[r + i] = st.c[i];
        }
        r += ns;
    }
    let (x0, xf) = model.config().boundary_augmented_states();
    for i in 0..ns {
        a[(r, lay.xi(0) + i)] = 1.0;
        l[r] = x0[i];
        u[r] = x0[i];
        r += 1;
    }
    for i in 0..d.nx {
        a[(r, lay.xi(nn - 1) + i)] = 1.0;
        l[r] = xf[i];
        u[r] = xf[i];
        r += 1;
    }
    for k in 1..nn {
        a[(r, lay.xi(k) + d.y_index())] = 1.0;
        l[r] = f64::NEG_INFINITY;
        u[r] = settings.gamma;
        r += 1;
    }
    let lo = model.config().input_lower();
    let hi = model.config().input_upper();
    for k in 0..nn - 1 {
        for i in 0..nu {
            a[(r, lay.eta(k) + i)] = 1.0;
            l[r] = lo[i];
            u[r] = hi[i];
            r += 1;
        }
    }
    for k in 0..nn - 1 {
        for i in 0..ns {
            a[(r, lay.q(k) + i)] = 1.0;
            l[r] = 0.0;
            u[r] = f64::INFINITY;
            r += 1;
            a[(r, lay.z(k) + i)] = 1.0;
            l[r] = 0.0;
            u[r] = f64::INFINITY;
            r += 1;
        }
    }
    debug_assert_eq!(r, rows);
    QpProblem::new(p, q, a, l, u)
}

/// Subproblem objective at a decision vector laid out as in [`Layout`],
/// evaluated term by term.
pub fn subproblem_objective(
    model: &Model,
    lay: &Layout,
    reference: &DiscreteTrajectory,
    settings: &ScpSettings,
    x: &DVector<f64>,
) -> f64 {
    let (traj, q, z) = SubproblemSolution::extract(lay, x);
    let w = traj.states[lay.nodes - 1][model.dims().w_index()];
    let slack: f64 = q.iter().chain(&z).map(|v| v.sum()).sum();
    w + settings.beta * slack + 0.5 / settings.rho * traj.squared_displacement(reference)
}

#[derive(Clone, Debug)]
pub struct SubproblemSolution {
    pub trajectory: DiscreteTrajectory,
    pub q: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
    /// `Σ 1ᵀ(q_k + z_k)`.
    pub slack_mass: f64,
    pub objective: f64,
    pub qp_status: QpStatus,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
}

impl SubproblemSolution {
    pub fn extract(
        lay: &Layout,
        x: &DVector<f64>,
    ) -> (DiscreteTrajectory, Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let seg =
            |off: usize, len: usize| DVector::from_column_slice(&x.as_slice()[off..off + len]);
        let states = (0..lay.nodes).map(|k| seg(lay.xi(k), lay.state)).collect();
        let inputs = (0..lay.nodes - 1)
            .map(|k| seg(lay.eta(k), lay.input))
            .collect();
        let q = (0..lay.nodes - 1)
            .map(|k| seg(lay.q(k), lay.state))
            .collect();
        let z = (0..lay.nodes - 1)
            .map(|k| seg(lay.z(k), lay.state))
            .collect();
        (DiscreteTrajectory { states, inputs }, q, z)
    }
}

/// Packs a trajectory and slacks into a decision vector.
pub fn pack(
    lay: &Layout,
    traj: &DiscreteTrajectory,
    q: &[DVector<f64>],
    z: &[DVector<f64>],
) -> DVector<f64> {
    let mut x = DVector::zeros(lay.len());
    for (k, v) in traj.states.iter().enumerate() {
        x.rows_mut(lay.xi(k), lay.state).copy_from(v);
    }
    for (k, v) in traj.inputs.iter().enumerate() {
        x.rows_mut(lay.eta(k), lay.input).copy_from(v);
    }
    for k in 0..lay.nodes - 1 {
        x.rows_mut(lay.q(k), lay.state).copy_from(&q[k]);
        x.rows_mut(lay.z(k), lay.state).copy_from(&z[k]);
    }
    x
}

/// Linearizes around `reference`, assembles and solves one subproblem.
pub fn solve_subproblem(
    model: &Model,
    grid: &Grid,
    reference: &DiscreteTrajectory,
    settings: &ScpSettings,
    qp_settings: &QpSettings,
    iteration: usize,
) -> Result<(
    SubproblemSolution,
    QpProblem,
    Vec<LinearizedStep>,
    DVector<f64>,
    DVector<f64>,
)> {
    let steps = transcription::linearize_all(model, grid, reference, &settings.integrator)?;
    let prob = assemble_subproblem(model, grid, &steps, reference, settings)?;
    let sol = qp::solve_qp(&prob, qp_settings)?;
    if sol.status != QpStatus::Solved {
        return Err(Error::Subproblem {
            iteration,
            status: sol.status.to_string(),
        });
    }
    let lay = Layout::new(model, grid);
    let (trajectory, q, z) = SubproblemSolution::extract(&lay, &sol.x);
    let slack_mass = q.iter().chain(&z).map(|v| v.sum()).sum();
    let out = SubproblemSolution {
        trajectory,
        q,
        z,
        slack_mass,
        objective: subproblem_objective(model, &lay, reference, settings, &sol.x),
        qp_status: sol.status,
        qp_iterations: sol.iterations,
        kkt_residual: sol.kkt_residual,
    };
    Ok((out, prob, steps, sol.x, sol.y))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    MaxIterations,
    Budget,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub displacement: f64,
    pub slack_mass: f64,
    /// Subproblem objective at its solution.
    pub model_value: f64,
    /// Subproblem objective at the reference with slacks closing the defects.
    pub model_value_at_reference: f64,
    pub qp_iterations: usize,
    pub kkt_residual: f64,
}

#[derive(Clone, Debug)]
pub struct ScpOutcome {
    pub trajectory: DiscreteTrajectory,
    /// Post-processed final report, including the per-iteration history.
    pub report: SolveReport,
    pub iterations: Vec<IterationRecord>,
    pub termination: Termination,
}

/// Model value at the reference: cost state plus the penalty on defects.
fn reference_model_value(
    model: &Model,
    reference: &DiscreteTrajectory,
    steps: &[LinearizedStep],
    beta: f64,
) -> f64 {
    let w = reference.states.last().expect("nonempty")[model.dims().w_index()];
    let defects: f64 = steps
        .iter()
        .enumerate()
        .map(|(k, s)| (&reference.states[k + 1] - &s.next).abs().sum())
        .sum();
    w + beta * defects
}

/// Runs the prox-linear loop from `initial`. Iteration 0 of the history is
/// the initial guess itself.
pub fn prox_linear_solve(
    model: &Model,
    initial: &DiscreteTrajectory,
    settings: &ScpSettings,
) -> Result<ScpOutcome> {
    prox_linear_solve_with_clock(model, initial, settings, Instant::now())
}

/// As [`prox_linear_solve`], measuring history times and the budget from
/// `start`.
pub fn prox_linear_solve_with_clock(
    model: &Model,
    initial: &DiscreteTrajectory,
    settings: &ScpSettings,
    start: Instant,
) -> Result<ScpOutcome> {
    settings.validate()?;
    let grid = settings.grid()?;
    initial.check(model, &grid)?;
    let history_entry = |iteration: usize, traj: &DiscreteTrajectory| -> Result<HistoryEntry> {
        let (_, rep) =
            transcription::rollout_and_report(model, &grid, &traj.inputs, &settings.integrator, 1)?;
        Ok(HistoryEntry {
            iteration,
            time_s: start.elapsed().as_secs_f64(),
            objective: rep.objective,
            violation: rep.violation,
        })
    };

    let mut reference = initial.clone();
    let mut history = vec![history_entry(0, &reference)?];
    let mut records = Vec::new();
    let mut warm: Option<(DVector<f64>, DVector<f64>)> = None;
    let mut termination = Termination::MaxIterations;

    for j in 1..=settings.max_iterations {
        let mut qp_settings = settings.qp.clone();
        if settings.qp_warm_start {
            qp_settings.warm_start = warm.take();
        }
        let (sub, _, steps, x, y) =
            solve_subproblem(model, &grid, &reference, settings, &qp_settings, j)?;
        let displacement = reference.squared_displacement(&sub.trajectory);
        records.push(IterationRecord {
            iteration: j,
            displacement,
            slack_mass: sub.slack_mass,
            model_value: sub.objective,
            model_value_at_reference: reference_model_value(
                model,
                &reference,
                &steps,
                settings.beta,
            ),
            qp_iterations: sub.qp_iterations,
            kkt_residual: sub.kkt_residual,
        });
        warm = Some((x, y));
        reference = sub.trajectory;
        history.push(history_entry(j, &reference)?);
        if displacement <= settings.tolerance {
            termination = Termination::Converged;
            break;
        }
        if let Some(b) = settings.budget_s {
            if start.elapsed().as_secs_f64() >= b {
                termination = Termination::Budget;
                break;
            }
        }
    }

    let (_, mut report) = transcription::rollout_and_report(
        model,
        &grid,
        &reference.inputs,
        &settings.integrator,
        1,
    )?;
    report.history = history;
    Ok(ScpOutcome {
        trajectory: reference,
        report,
        iterations: records,
        termination,
    })
}

/// Inputs drawn uniformly inside their bounds, states by forward shooting
/// from the initial boundary state.
pub fn random_initialization<R: Rng + ?Sized>(
    model: &Model,
    grid: &Grid,
    settings: &IntegratorSettings,
    rng: &mut R,
) -> Result<DiscreteTrajectory> {
    let lo = model.config().input_lower();
    let hi = model.config().input_upper();
    let inputs: Vec<DVector<f64>> = (0..grid.intervals())
        .map(|_| DVector::from_fn(lo.len(), |i, _| rng.random_range(lo[i]..=hi[i])))
        .collect();
    let (x0, _) = model.config().boundary_augmented_states();
    let states = transcription::forward_shoot(model, grid, &x0, &inputs, settings)?;
    Ok(DiscreteTrajectory { states, inputs })
}
