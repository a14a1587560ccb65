//! Normalized-time grid, shooting maps, linearizations and post-processing.
//!
//! Indices in code are zero-based: nodes `k = 0..N`, intervals `k = 0..N-1`
//! with `τ_k = k / (N - 1)`. Inputs are piecewise constant per interval.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Model;
use crate::error::{Error, Result};
use crate::integrator::{self, IntegratorSettings};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grid {
    nodes: usize,
}

impl Grid {
    pub fn new(nodes: usize) -> Result<Self> {
        if nodes < 2 {
            return Err(Error::Validation("grid needs at least 2 nodes".into()));
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn intervals(&self) -> usize {
        self.nodes - 1
    }

    pub fn tau(&self, k: usize) -> f64 {
        k as f64 / (self.nodes - 1) as f64
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.nodes - 1) as f64
    }

    pub fn interval(&self, k: usize) -> (f64, f64) {
        let b = if k + 1 == self.nodes - 1 {
            1.0
        } else {
            self.tau(k + 1)
        };
        (self.tau(k), b)
    }
}

/// State parameters `ξ_{1:N}` and input parameters `η_{1:N-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteTrajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryFile {
    states: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
}

impl Serialize for DiscreteTrajectory {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        TrajectoryFile {
            states: self.states.iter().map(|v| v.as_slice().to_vec()).collect(),
            inputs: self.inputs.iter().map(|v| v.as_slice().to_vec()).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for DiscreteTrajectory {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let f = TrajectoryFile::deserialize(d)?;
        Ok(Self {
            states: f.states.into_iter().map(DVector::from_vec).collect(),
            inputs: f.inputs.into_iter().map(DVector::from_vec).collect(),
        })
    }
}

impl DiscreteTrajectory {
    pub fn check(&self, model: &Model, grid: &Grid) -> Result<()> {
        let d = model.dims();
        if self.states.len() != grid.nodes() || self.inputs.len() != grid.intervals() {
            return Err(Error::Dimension(format!(
                "trajectory has {} states / {} inputs, grid expects {} / {}",
                self.states.len(),
                self.inputs.len(),
                grid.nodes(),
                grid.intervals()
            )));
        }
        if self.states.iter().any(|x| x.len() != d.state())
            || self.inputs.iter().any(|u| u.len() != d.input())
        {
            return Err(Error::Dimension(format!(
                "trajectory vectors must have lengths {} (state) and {} (input)",
                d.state(),
                d.input()
            )));
        }
        Ok(())
    }

    /// Physical final time `Δτ Σ_k s_k`.
    pub fn final_time(&self, grid: &Grid) -> f64 {
        final_time(&self.inputs, grid)
    }

    /// `Σ‖ξ_k - ξ'_k‖² + Σ‖η_k - η'_k‖²`.
    pub fn squared_displacement(&self, other: &Self) -> f64 {
        let a: f64 = self
            .states
            .iter()
            .zip(&other.states)
            .map(|(x, y)| (x - y).norm_squared())
            .sum();
        let b: f64 = self
            .inputs
            .iter()
            .zip(&other.inputs)
            .map(|(x, y)| (x - y).norm_squared())
            .sum();
        a + b
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trajectory serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn final_time(inputs: &[DVector<f64>], grid: &Grid) -> f64 {
    let s = inputs.iter().map(|u| u[u.len() - 1]).sum::<f64>();
    grid.spacing() * s
}

/// First-order model `F_k(ξ, η) ≈ A ξ + B η + c` around a reference.
#[derive(Clone, Debug)]
pub struct LinearizedStep {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DVector<f64>,
    /// `F_k` at the reference point.
    pub next: DVector<f64>,
}

impl LinearizedStep {
    pub fn predict(&self, xi: &DVector<f64>, eta: &DVector<f64>) -> DVector<f64> {
        &self.a * xi + &self.b * eta + &self.c
    }
}

/// Shooting map `F_k`: integrates interval `k` from `xi` under constant `eta`.
pub fn shoot(
    model: &Model,
    grid: &Grid,
    k: usize,
    xi: &DVector<f64>,
    eta: &DVector<f64>,
    settings: &IntegratorSettings,
) -> Result<DVector<f64>> {
    let (a, b) = grid.interval(k);
    integrator::integrate_state(model, xi, eta, a, b, settings)
}

pub fn linearize(
    model: &Model,
    grid: &Grid,
    k: usize,
    xi: &DVector<f64>,
    eta: &DVector<f64>,
    settings: &IntegratorSettings,
) -> Result<LinearizedStep> {
    let (ta, tb) = grid.interval(k);
    let bundle = integrator::integrate_sensitivities(model, xi, eta, ta, tb, settings)?;
    let c = &bundle.state - &bundle.phi_x * xi - &bundle.phi_u * eta;
    Ok(LinearizedStep {
        a: bundle.phi_x,
        b: bundle.phi_u,
        c,
        next: bundle.state,
    })
}

/// Linearizes every interval of a reference trajectory; intervals run in
/// parallel.
pub fn linearize_all(
    model: &Model,
    grid: &Grid,
    reference: &DiscreteTrajectory,
    settings: &IntegratorSettings,
) -> Result<Vec<LinearizedStep>> {
    (0..grid.intervals())
        .into_par_iter()
        .map(|k| {
            linearize(
                model,
                grid,
                k,
                &reference.states[k],
                &reference.inputs[k],
                settings,
            )
        })
        .collect()
}

/// States reached by chaining the shooting maps from `x0`.
pub fn forward_shoot(
    model: &Model,
    grid: &Grid,
    x0: &DVector<f64>,
    inputs: &[DVector<f64>],
    settings: &IntegratorSettings,
) -> Result<Vec<DVector<f64>>> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(x0.clone());
    for (k, eta) in inputs.iter().enumerate() {
        let next = shoot(model, grid, k, &states[k], eta, settings)?;
        states.push(next);
    }
    Ok(states)
}

/// Post-processing violation: final `y`, ℓ₁ terminal error on the agent
/// states, and ℓ₁ input-bound excess summed over intervals.
pub fn constraint_violation(
    model: &Model,
    final_state: &DVector<f64>,
    inputs: &[DVector<f64>],
) -> f64 {
    let d = model.dims();
    let cfg = model.config();
    let (_, xf) = cfg.boundary_augmented_states();
    let lo = cfg.input_lower();
    let hi = cfg.input_upper();
    let terminal: f64 = (0..d.nx).map(|i| (final_state[i] - xf[i]).abs()).sum();
    let excess: f64 = inputs
        .iter()
        .map(|eta| {
            (0..d.input())
                .map(|j| (eta[j] - hi[j]).max(0.0) + (lo[j] - eta[j]).max(0.0))
                .sum::<f64>()
        })
        .sum();
    final_state[d.y_index()] + terminal + excess
}

/// One point of a post-processed trajectory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub time: f64,
    pub tau: f64,
    pub state: DVector<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub iteration: usize,
    /// Solver wall-clock time since the start of the run, seconds.
    pub time_s: f64,
    pub objective: f64,
    pub violation: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub objective: f64,
    pub violation: f64,
    pub final_time_s: f64,
    #[serde(default)]
    pub history: Vec<HistoryEntry>,
}

impl SolveReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization is infallible")
    }
}

/// Dense re-integration of an input sequence from the initial state.
#[derive(Clone, Debug)]
pub struct Rollout {
    /// Node states `ξ̃_k` (the first is `x̄_0`).
    pub nodes: Vec<DVector<f64>>,
    pub samples: Vec<Sample>,
}

/// Integrates from `x̄_0` under piecewise-constant `inputs`, sampling each
/// interval at `samples_per_interval` uniform points, and evaluates the
/// post-processing objective, violation and final time.
pub fn rollout_and_report(
    model: &Model,
    grid: &Grid,
    inputs: &[DVector<f64>],
    settings: &IntegratorSettings,
    samples_per_interval: usize,
) -> Result<(Rollout, SolveReport)> {
    if inputs.len() != grid.intervals() {
        return Err(Error::Dimension(format!(
            "{} inputs for {} intervals",
            inputs.len(),
            grid.intervals()
        )));
    }
    let (x0, _) = model.config().boundary_augmented_states();
    let s_idx = model.dims().s_index();
    let mut nodes = vec![x0.clone()];
    let mut samples = Vec::new();
    let mut t_start = 0.0;
    for (k, eta) in inputs.iter().enumerate() {
        let (ta, tb) = grid.interval(k);
        let pts = integrator::integrate_state_sampled(
            model,
            &nodes[k],
            eta,
            ta,
            tb,
            samples_per_interval,
            settings,
        )?;
        let n_pts = pts.len();
        let s = eta[s_idx];
        for (j, state) in pts.into_iter().enumerate() {
            if k > 0 && j == 0 {
                continue;
            }
            let frac = j as f64 / (n_pts - 1) as f64;
            let tau = ta + frac * (tb - ta);
            samples.push(Sample {
                time: t_start + s * (tau - ta),
                tau,
                state,
            });
        }
        t_start += s * (tb - ta);
        nodes.push(samples.last().expect("nonempty").state.clone());
    }
    let last = nodes.last().expect("nonempty");
    let report = SolveReport {
        objective: last[model.dims().w_index()],
        violation: constraint_violation(model, last, inputs),
        final_time_s: final_time(inputs, grid),
        history: Vec::new(),
    };
    Ok((Rollout { nodes, samples }, report))
}

/// Worst-case constraint margins over a set of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClearanceAudit {
    pub min_pairwise_distance: f64,
    /// Minimum planar distance to each obstacle center.
    pub min_obstacle_distance: Vec<f64>,
    pub max_speed: f64,
    pub min_thrust: f64,
    pub max_thrust: f64,
    /// Largest value of `cos θ_max ‖T‖ - T_z`.
    pub max_tilt_residual: f64,
    /// Largest position-box excess.
    pub max_box_excess: f64,
}

impl Rollout {
    pub fn audit(&self, model: &Model) -> ClearanceAudit {
        let cfg = model.config();
        let m = cfg.num_agents;
        let cos_tilt = cfg.tilt_max.cos();
        let mut a = ClearanceAudit {
            min_pairwise_distance: f64::INFINITY,
            min_obstacle_distance: vec![f64::INFINITY; cfg.obstacles.len()],
            max_speed: 0.0,
            min_thrust: f64::INFINITY,
            max_thrust: 0.0,
            max_tilt_residual: f64::NEG_INFINITY,
            max_box_excess: f64::NEG_INFINITY,
        };
        for s in &self.samples {
            let x = s.state.as_slice();
            for i in 0..m {
                let ag = model.agent(x, i);
                a.max_speed = a.max_speed.max(ag.v.norm());
                let tn = ag.thrust.norm();
                a.min_thrust = a.min_thrust.min(tn);
                a.max_thrust = a.max_thrust.max(tn);
                a.max_tilt_residual = a.max_tilt_residual.max(cos_tilt * tn - ag.thrust.z);
                for k in 0..3 {
                    a.max_box_excess = a
                        .max_box_excess
                        .max(ag.r[k] - cfg.position_max[k])
                        .max(cfg.position_min[k] - ag.r[k]);
                }
                for (l, o) in cfg.obstacles.iter().enumerate() {
                    let d = (ag.r.x - o.center[0]).hypot(ag.r.y - o.center[1]);
                    a.min_obstacle_distance[l] = a.min_obstacle_distance[l].min(d);
                }
                for j in (i + 1)..m {
                    let other = model.agent(x, j);
                    a.min_pairwise_distance = a.min_pairwise_distance.min((ag.r - other.r).norm());
                }
            }
        }
        a
    }

    /// CSV with columns `time_s,agent_id,rx,ry,rz,vx,vy,vz,Tx,Ty,Tz`; agents
    /// are numbered from 0.
    pub fn trajectory_csv(&self, agents: usize) -> String {
        let mut out = String::from("time_s,agent_id,rx,ry,rz,vx,vy,vz,Tx,Ty,Tz\n");
        for s in &self.samples {
            for i in 0..agents {
                write!(out, "{},{}", s.time, i).unwrap();
                for k in 0..9 {
                    write!(out, ",{}", s.state[9 * i + k]).unwrap();
                }
                out.push('\n');
            }
        }
        out
    }

    /// Plot-ready clearance series: speeds, obstacle distances and pairwise
    /// distances per sample.
    pub fn clearance_csv(&self, model: &Model) -> String {
        let cfg = model.config();
        let m = cfg.num_agents;
        let mut out = String::from("time_s");
        for i in 0..m {
            write!(out, ",speed_{i}").unwrap();
        }
        for i in 0..m {
            for l in 0..cfg.obstacles.len() {
                write!(out, ",obstacle_{l}_distance_{i}").unwrap();
            }
        }
        for i in 0..m {
            for j in (i + 1)..m {
                write!(out, ",pair_{i}_{j}_distance").unwrap();
            }
        }
        out.push('\n');
        for s in &self.samples {
            let x = s.state.as_slice();
            write!(out, "{}", s.time).unwrap();
            let agents: Vec<_> = (0..m).map(|i| model.agent(x, i)).collect();
            for a in &agents {
                write!(out, ",{}", a.v.norm()).unwrap();
            }
            for a in &agents {
                for o in &cfg.obstacles {
                    write!(out, ",{}", (a.r.x - o.center[0]).hypot(a.r.y - o.center[1])).unwrap();
                }
            }
            for i in 0..m {
                for j in (i + 1)..m {
                    write!(out, ",{}", (agents[i].r - agents[j].r).norm()).unwrap();
                }
            }
            out.push('\n');
        }
        out
    }
}
