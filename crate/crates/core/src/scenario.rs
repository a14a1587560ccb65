//! Problem parameters: agents, obstacles, bounds, weights and boundary states.
//!
//! Scenarios are stored as JSON (see `docs/scenario_schema.md`). Loading
//! validates every invariant; a config that made it through
//! [`ScenarioConfig::validate`] is treated as immutable afterwards.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_GRAVITY: f64 = 9.81;

fn default_gravity() -> f64 {
    DEFAULT_GRAVITY
}

/// Vertical cylinder (infinite height) described by its planar center.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// One endpoint of an agent's trajectory. A missing thrust means hover
/// thrust, i.e. `agent_mass * gravity` along the vertical axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundaryState {
    pub position: [f64; 3],
    #[serde(default)]
    pub velocity: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thrust: Option<[f64; 3]>,
}

impl BoundaryState {
    pub fn hover_at(position: [f64; 3]) -> Self {
        Self {
            position,
            velocity: [0.0; 3],
            thrust: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentBoundary {
    pub initial: BoundaryState,
    #[serde(rename = "final")]
    pub terminal: BoundaryState,
}

/// All physical and problem parameters. Field units are SI (m, s, kg, N, rad).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub num_agents: usize,
    pub agent_mass: f64,
    #[serde(default = "default_gravity")]
    pub gravity: f64,
    pub obstacles: Vec<Obstacle>,
    pub inter_agent_distance: f64,
    pub position_min: [f64; 3],
    pub position_max: [f64; 3],
    pub velocity_max: f64,
    pub thrust_min: f64,
    pub thrust_max: f64,
    pub tilt_max: f64,
    pub thrust_rate_min: [f64; 3],
    pub thrust_rate_max: [f64; 3],
    pub time_min: f64,
    pub time_max: f64,
    pub normalized_weights: [f64; 3],
    pub boundary: Vec<AgentBoundary>,
}

/// Cost weights scaled by the time and actuator bounds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedWeights {
    /// Weight on final time, 1/s.
    pub alpha1: f64,
    /// Weight on squared thrust rate, s/N².
    pub alpha2: f64,
    /// Weight on squared thrust, 1/(s·N²).
    pub alpha3: f64,
}

/// Problem dimensions derived from the agent and obstacle counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub agents: usize,
    pub obstacles: usize,
    /// Stacked agent state dimension, 9m.
    pub nx: usize,
    /// Stacked thrust-rate dimension, 3m.
    pub nu: usize,
    /// State inequality count, m(10 + n_o) + m(m-1)/2.
    pub ng: usize,
    /// Input-side inequality count, 2 n_u + 3.
    pub n_big_g: usize,
}

impl Dims {
    pub fn new(agents: usize, obstacles: usize) -> Self {
        let nx = 9 * agents;
        let nu = 3 * agents;
        Self {
            agents,
            obstacles,
            nx,
            nu,
            ng: agents * (10 + obstacles) + agents * agents.saturating_sub(1) / 2,
            n_big_g: 2 * nu + 3,
        }
    }

    /// Augmented state dimension: agent states plus `y` and `w`.
    pub fn state(&self) -> usize {
        self.nx + 2
    }

    /// Augmented input dimension: thrust rates plus the time dilation `s`.
    pub fn input(&self) -> usize {
        self.nu + 1
    }

    pub fn y_index(&self) -> usize {
        self.nx
    }

    pub fn w_index(&self) -> usize {
        self.nx + 1
    }

    pub fn s_index(&self) -> usize {
        self.nu
    }

    pub fn per_agent_constraints(&self) -> usize {
        10 + self.obstacles
    }

    pub fn pair_count(&self) -> usize {
        self.agents * self.agents.saturating_sub(1) / 2
    }
}

impl ScenarioConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::ScenarioNotFound(path.to_path_buf())
            } else {
                Error::io(path, e)
            }
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serialization is infallible")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.num_agents, self.obstacles.len())
    }

    /// Thrust that cancels gravity for one agent.
    pub fn hover_thrust(&self) -> [f64; 3] {
        [0.0, 0.0, self.agent_mass * self.gravity]
    }

    pub fn derive_weights(&self) -> DerivedWeights {
        let [a1, a2, a3] = self.normalized_weights;
        let u_norm_sq: f64 = self.thrust_rate_max.iter().map(|u| u * u).sum();
        DerivedWeights {
            alpha1: a1 / self.time_max,
            alpha2: a2 / (self.time_max * u_norm_sq),
            alpha3: a3 / (self.time_max * self.thrust_max * self.thrust_max),
        }
    }

    fn resolve(&self, b: &BoundaryState) -> [f64; 9] {
        let t = b.thrust.unwrap_or_else(|| self.hover_thrust());
        let mut out = [0.0; 9];
        out[0..3].copy_from_slice(&b.position);
        out[3..6].copy_from_slice(&b.velocity);
        out[6..9].copy_from_slice(&t);
        out
    }

    pub fn initial_state(&self, agent: usize) -> [f64; 9] {
        self.resolve(&self.boundary[agent].initial)
    }

    pub fn final_state(&self, agent: usize) -> [f64; 9] {
        self.resolve(&self.boundary[agent].terminal)
    }

    /// Augmented boundary states: stacked agent states followed by `y = w = 0`.
    pub fn boundary_augmented_states(&self) -> (DVector<f64>, DVector<f64>) {
        let dims = self.dims();
        let mut x0 = DVector::zeros(dims.state());
        let mut xf = DVector::zeros(dims.state());
        for i in 0..self.num_agents {
            x0.rows_mut(9 * i, 9)
                .copy_from_slice(&self.initial_state(i));
            xf.rows_mut(9 * i, 9).copy_from_slice(&self.final_state(i));
        }
        (x0, xf)
    }

    /// Lower bound on the augmented input `(u^1, ..., u^m, s)`.
    pub fn input_lower(&self) -> DVector<f64> {
        let dims = self.dims();
        let mut v = DVector::zeros(dims.input());
        for i in 0..self.num_agents {
            v.rows_mut(3 * i, 3).copy_from_slice(&self.thrust_rate_min);
        }
        v[dims.s_index()] = self.time_min;
        v
    }

    pub fn input_upper(&self) -> DVector<f64> {
        let dims = self.dims();
        let mut v = DVector::zeros(dims.input());
        for i in 0..self.num_agents {
            v.rows_mut(3 * i, 3).copy_from_slice(&self.thrust_rate_max);
        }
        v[dims.s_index()] = self.time_max;
        v
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        let scalars = [
            ("agent_mass", self.agent_mass),
            ("gravity", self.gravity),
            ("inter_agent_distance", self.inter_agent_distance),
            ("velocity_max", self.velocity_max),
            ("thrust_min", self.thrust_min),
            ("thrust_max", self.thrust_max),
            ("tilt_max", self.tilt_max),
            ("time_min", self.time_min),
            ("time_max", self.time_max),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        let vectors = [
            self.position_min,
            self.position_max,
            self.thrust_rate_min,
            self.thrust_rate_max,
        ];
        if vectors.iter().flatten().any(|v| !v.is_finite())
            || self.normalized_weights.iter().any(|v| !v.is_finite())
        {
            return fail("bounds and weights must be finite".into());
        }

        if self.num_agents == 0 {
            return fail("num_agents must be positive".into());
        }
        if self.boundary.len() != self.num_agents {
            return fail(format!(
                "boundary lists {} agents but num_agents = {}",
                self.boundary.len(),
                self.num_agents
            ));
        }
        if self.agent_mass <= 0.0 {
            return fail("agent_mass must be positive".into());
        }
        if self.gravity < 0.0 {
            return fail("gravity must be nonnegative".into());
        }
        if self.inter_agent_distance < 0.0 {
            return fail("inter_agent_distance must be nonnegative".into());
        }
        if self.velocity_max <= 0.0 {
            return fail("velocity_max must be positive".into());
        }
        if (0..3).any(|k| self.position_min[k] >= self.position_max[k]) {
            return fail("position_min must be < position_max componentwise".into());
        }
        if (0..3).any(|k| self.thrust_rate_min[k] >= self.thrust_rate_max[k]) {
            return fail("thrust_rate_min must be < thrust_rate_max componentwise".into());
        }
        if !(self.thrust_min > 0.0 && self.thrust_min < self.thrust_max) {
            return fail("thrust bounds must satisfy 0 < thrust_min < thrust_max".into());
        }
        if !(0.0..=FRAC_PI_2).contains(&self.tilt_max) {
            return fail("tilt_max must lie in [0, pi/2]".into());
        }
        if !(self.time_min > 0.0 && self.time_min < self.time_max) {
            return fail("time bounds must satisfy 0 < time_min < time_max".into());
        }
        if self.normalized_weights.iter().any(|&a| a < 0.0) {
            return fail("weights must be nonnegative".into());
        }
        let wsum: f64 = self.normalized_weights.iter().sum();
        if (wsum - 1.0).abs() > 1e-9 {
            return fail(format!("weights must sum to 1 (sum = {wsum})"));
        }
        for (l, o) in self.obstacles.iter().enumerate() {
            if !(o.radius.is_finite() && o.radius >= 0.0 && o.center.iter().all(|c| c.is_finite()))
            {
                return fail(format!(
                    "obstacle {l} must have a finite nonnegative radius"
                ));
            }
        }

        for (i, b) in self.boundary.iter().enumerate() {
            for (label, s) in [("initial", &b.initial), ("final", &b.terminal)] {
                let finite = s.position.iter().chain(&s.velocity).all(|v| v.is_finite())
                    && s.thrust.is_none_or(|t| t.iter().all(|v| v.is_finite()));
                if !finite {
                    return fail(format!("agent {i} {label} state must be finite"));
                }
                if (0..3).any(|k| {
                    s.position[k] < self.position_min[k] || s.position[k] > self.position_max[k]
                }) {
                    return fail(format!(
                        "agent {i} {label} position outside position bounds"
                    ));
                }
                for (l, o) in self.obstacles.iter().enumerate() {
                    let dx = s.position[0] - o.center[0];
                    let dy = s.position[1] - o.center[1];
                    if dx.hypot(dy) < o.radius {
                        return fail(format!("agent {i} {label} position inside obstacle {l}"));
                    }
                }
            }
        }
        for (label, pick) in [("initial", true), ("final", false)] {
            for i in 0..self.num_agents {
                for j in (i + 1)..self.num_agents {
                    let (a, b) = if pick {
                        (&self.boundary[i].initial, &self.boundary[j].initial)
                    } else {
                        (&self.boundary[i].terminal, &self.boundary[j].terminal)
                    };
                    let dist = (0..3)
                        .map(|k| (a.position[k] - b.position[k]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if dist < self.inter_agent_distance {
                        return fail(format!(
                            "{label} separation < d between agents {i} and {j} ({dist} < {})",
                            self.inter_agent_distance
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Demo scenario with the reference parameter set and `agents` ∈ {1..=6}
    /// quadrotors flying between vertices and edge midpoints of the box with
    /// corners (2,2,2) and (14,14,14). Agents 1–4 fly the box's space
    /// diagonals; agents 5 and 6 connect opposite edge midpoints. All four
    /// diagonals cross the box center, so every multi-agent case needs
    /// active deconfliction.
    pub fn demo(agents: usize) -> Result<Self> {
        const ROUTES: [([f64; 3], [f64; 3]); 6] = [
            ([2.0, 2.0, 2.0], [14.0, 14.0, 14.0]),
            ([14.0, 2.0, 2.0], [2.0, 14.0, 14.0]),
            ([2.0, 14.0, 2.0], [14.0, 2.0, 14.0]),
            ([14.0, 14.0, 2.0], [2.0, 2.0, 14.0]),
            ([8.0, 2.0, 2.0], [8.0, 14.0, 14.0]),
            ([2.0, 8.0, 14.0], [14.0, 8.0, 2.0]),
        ];
        if agents == 0 || agents > ROUTES.len() {
            return Err(Error::Validation(format!(
                "demo scenarios support 1..={} agents",
                ROUTES.len()
            )));
        }
        let cfg = Self {
            name: Some(format!("demo-{agents}-agent")),
            num_agents: agents,
            agent_mass: 0.35,
            gravity: DEFAULT_GRAVITY,
            obstacles: vec![
                Obstacle {
                    center: [5.0, 8.0],
                    radius: 2.0,
                },
                Obstacle {
                    center: [9.0, 5.0],
                    radius: 1.5,
                },
            ],
            inter_agent_distance: 1.0,
            position_min: [0.0; 3],
            position_max: [15.0; 3],
            velocity_max: 3.0,
            thrust_min: 2.0,
            thrust_max: 5.0,
            tilt_max: std::f64::consts::FRAC_PI_4,
            thrust_rate_min: [-2.0; 3],
            thrust_rate_max: [2.0; 3],
            time_min: 7.0,
            time_max: 28.0,
            normalized_weights: [0.1, 0.8, 0.1],
            boundary: ROUTES[..agents]
                .iter()
                .map(|&(a, b)| AgentBoundary {
                    initial: BoundaryState::hover_at(a),
                    terminal: BoundaryState::hover_at(b),
                })
                .collect(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
