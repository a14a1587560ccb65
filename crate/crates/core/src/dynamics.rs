//! Agent dynamics, inequality stacks and the time-scaled augmented system.
//!
//! Layout of the augmented state `x̄ ∈ R^{9m+2}`: agent `i` occupies
//! `[9i, 9i+9)` as (position, velocity, thrust), followed by the integrated
//! squared violation `y` and the running cost `w`. The augmented input
//! `ū ∈ R^{3m+1}` holds the thrust rates of every agent and then the time
//! dilation `s = dt/dτ`.
//!
//! Non-smooth points use fixed subgradients: `d/dz max(z, 0) = 0` at `z = 0`
//! and `∇‖z‖ = 0` at `z = 0`.

use nalgebra::{DMatrix, DVector, Vector3};

use crate::scenario::{DerivedWeights, Dims, ScenarioConfig};

/// Position, velocity and thrust of one quadrotor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AgentState {
    pub r: Vector3<f64>,
    pub v: Vector3<f64>,
    pub thrust: Vector3<f64>,
}

impl AgentState {
    pub fn from_slice(x: &[f64]) -> Self {
        Self {
            r: Vector3::new(x[0], x[1], x[2]),
            v: Vector3::new(x[3], x[4], x[5]),
            thrust: Vector3::new(x[6], x[7], x[8]),
        }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [
            self.r.x,
            self.r.y,
            self.r.z,
            self.v.x,
            self.v.y,
            self.v.z,
            self.thrust.x,
            self.thrust.y,
            self.thrust.z,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Extraction matrices for planar position, stacked positions and stacked
/// thrusts.
#[derive(Clone, Debug)]
pub struct SelectorMatrices {
    pub planar: DMatrix<f64>,
    pub positions: DMatrix<f64>,
    pub thrusts: DMatrix<f64>,
    pub vertical: Vector3<f64>,
}

impl SelectorMatrices {
    pub fn new(dims: &Dims) -> Self {
        let n = dims.state();
        let mut positions = DMatrix::zeros(3 * dims.agents, n);
        let mut thrusts = DMatrix::zeros(3 * dims.agents, n);
        for i in 0..dims.agents {
            for k in 0..3 {
                positions[(3 * i + k, 9 * i + k)] = 1.0;
                thrusts[(3 * i + k, 9 * i + 6 + k)] = 1.0;
            }
        }
        let mut planar = DMatrix::zeros(2, 3);
        planar[(0, 0)] = 1.0;
        planar[(1, 1)] = 1.0;
        Self {
            planar,
            positions,
            thrusts,
            vertical: Vector3::z(),
        }
    }
}

fn unit(v: &Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        Vector3::zeros()
    }
}

/// Sums `[g_j]_+²` and accumulates `2[g_j]_+ ∇g_j` for active entries.
struct Accumulator<'a> {
    total: f64,
    grad: Option<&'a mut [f64]>,
}

impl<'a> Accumulator<'a> {
    fn new(grad: Option<&'a mut [f64]>, len: usize) -> Self {
        let grad = grad.map(|g| {
            g[..len].fill(0.0);
            g
        });
        Self { total: 0.0, grad }
    }

    fn add(&mut self, value: f64, contrib: impl FnOnce(f64, &mut [f64])) {
        if value > 0.0 {
            self.total += value * value;
            if let Some(gr) = self.grad.as_deref_mut() {
                contrib(2.0 * value, gr);
            }
        }
    }
}

/// Evaluates every function of the continuous-time problem for one scenario.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ScenarioConfig,
    weights: DerivedWeights,
    dims: Dims,
    cos_tilt: f64,
}

impl Model {
    pub fn new(cfg: &ScenarioConfig) -> Self {
        Self {
            weights: cfg.derive_weights(),
            dims: cfg.dims(),
            cos_tilt: cfg.tilt_max.cos(),
            cfg: cfg.clone(),
        }
    }

    /// Same scenario with explicitly supplied cost weights.
    pub fn with_weights(cfg: &ScenarioConfig, weights: DerivedWeights) -> Self {
        Self {
            weights,
            ..Self::new(cfg)
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn dims(&self) -> &Dims {
        &self.dims
    }

    pub fn weights(&self) -> &DerivedWeights {
        &self.weights
    }

    pub fn agent(&self, x: &[f64], i: usize) -> AgentState {
        AgentState::from_slice(&x[9 * i..9 * i + 9])
    }

    /// Translational dynamics of one agent in physical time.
    pub fn agent_dynamics(&self, x: &AgentState, u: &Vector3<f64>) -> [f64; 9] {
        let acc = x.thrust / self.cfg.agent_mass - self.cfg.gravity * Vector3::z();
        [x.v.x, x.v.y, x.v.z, acc.x, acc.y, acc.z, u.x, u.y, u.z]
    }

    /// Per-agent block `g^i`: position box (6), speed, thrust max, thrust
    /// min, tilt, then one entry per obstacle. Nonpositive means satisfied.
    fn agent_constraints(&self, a: &AgentState, out: &mut [f64]) {
        let c = &self.cfg;
        for k in 0..3 {
            out[k] = a.r[k] - c.position_max[k];
            out[3 + k] = -a.r[k] + c.position_min[k];
        }
        let t_norm = a.thrust.norm();
        out[6] = a.v.norm() - c.velocity_max;
        out[7] = t_norm - c.thrust_max;
        out[8] = -t_norm + c.thrust_min;
        out[9] = self.cos_tilt * t_norm - a.thrust.z;
        for (l, o) in c.obstacles.iter().enumerate() {
            let dx = a.r.x - o.center[0];
            let dy = a.r.y - o.center[1];
            out[10 + l] = o.radius - dx.hypot(dy);
        }
    }

    /// The stacked state inequalities `g`: all per-agent blocks in agent
    /// order, then inter-agent separations for pairs (1,2), (1,3), …, (m-1,m).
    /// Only the first `9m` entries of `x` are read.
    pub fn state_inequalities(&self, x: &[f64]) -> DVector<f64> {
        let d = &self.dims;
        let per = d.per_agent_constraints();
        let mut g = DVector::zeros(d.ng);
        for i in 0..d.agents {
            let a = self.agent(x, i);
            self.agent_constraints(&a, &mut g.as_mut_slice()[per * i..per * (i + 1)]);
        }
        let mut idx = per * d.agents;
        for i in 0..d.agents {
            for j in (i + 1)..d.agents {
                let ri = Vector3::new(x[9 * i], x[9 * i + 1], x[9 * i + 2]);
                let rj = Vector3::new(x[9 * j], x[9 * j + 1], x[9 * j + 2]);
                g[idx] = self.cfg.inter_agent_distance - (ri - rj).norm();
                idx += 1;
            }
        }
        g
    }

    /// `‖[g]_+‖²` and, if requested, its gradient with respect to the agent
    /// states (length `9m`).
    pub fn violation(&self, x: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let c = &self.cfg;
        let d = &self.dims;
        let mut acc = Accumulator::new(grad, d.nx);
        for i in 0..d.agents {
            let a = self.agent(x, i);
            let b = 9 * i;
            for k in 0..3 {
                acc.add(a.r[k] - c.position_max[k], |s, gr| gr[b + k] += s);
                acc.add(-a.r[k] + c.position_min[k], |s, gr| gr[b + k] -= s);
            }
            let vu = unit(&a.v);
            acc.add(a.v.norm() - c.velocity_max, |s, gr| {
                for k in 0..3 {
                    gr[b + 3 + k] += s * vu[k];
                }
            });
            let t_norm = a.thrust.norm();
            let tu = unit(&a.thrust);
            acc.add(t_norm - c.thrust_max, |s, gr| {
                for k in 0..3 {
                    gr[b + 6 + k] += s * tu[k];
                }
            });
            acc.add(-t_norm + c.thrust_min, |s, gr| {
                for k in 0..3 {
                    gr[b + 6 + k] -= s * tu[k];
                }
            });
            let cos_tilt = self.cos_tilt;
            acc.add(cos_tilt * t_norm - a.thrust.z, |s, gr| {
                for k in 0..3 {
                    gr[b + 6 + k] += s * cos_tilt * tu[k];
                }
                gr[b + 8] -= s;
            });
            for o in &c.obstacles {
                let dx = a.r.x - o.center[0];
                let dy = a.r.y - o.center[1];
                let dist = dx.hypot(dy);
                acc.add(o.radius - dist, |s, gr| {
                    if dist > 0.0 {
                        gr[b] -= s * dx / dist;
                        gr[b + 1] -= s * dy / dist;
                    }
                });
            }
        }
        for i in 0..d.agents {
            for j in (i + 1)..d.agents {
                let delta = Vector3::new(
                    x[9 * i] - x[9 * j],
                    x[9 * i + 1] - x[9 * j + 1],
                    x[9 * i + 2] - x[9 * j + 2],
                );
                let du = unit(&delta);
                acc.add(c.inter_agent_distance - delta.norm(), |s, gr| {
                    for k in 0..3 {
                        gr[9 * i + k] -= s * du[k];
                        gr[9 * j + k] += s * du[k];
                    }
                });
            }
        }
        acc.total
    }

    /// Running cost rate `mα₁ + α₂Σ‖u^i‖² + α₃Σ‖T^i‖²` in physical time.
    pub fn cost_rate(&self, x: &[f64], u: &[f64]) -> f64 {
        let w = &self.weights;
        let m = self.dims.agents;
        let mut u2 = 0.0;
        let mut t2 = 0.0;
        for i in 0..m {
            u2 += (0..3).map(|k| u[3 * i + k].powi(2)).sum::<f64>();
            t2 += (0..3).map(|k| x[9 * i + 6 + k].powi(2)).sum::<f64>();
        }
        m as f64 * w.alpha1 + w.alpha2 * u2 + w.alpha3 * t2
    }

    /// Time-scaled augmented dynamics `f̄(x̄, ū)` written into `out`.
    pub fn augmented_dynamics_into(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let d = &self.dims;
        let s = u[d.s_index()];
        let inv_mass = 1.0 / self.cfg.agent_mass;
        let g0 = self.cfg.gravity;
        for i in 0..d.agents {
            let b = 9 * i;
            for k in 0..3 {
                out[b + k] = s * x[b + 3 + k];
                out[b + 3 + k] = s * x[b + 6 + k] * inv_mass;
                out[b + 6 + k] = s * u[3 * i + k];
            }
            out[b + 5] -= s * g0;
        }
        out[d.y_index()] = s * self.violation(x, None);
        out[d.w_index()] = s * self.cost_rate(x, u);
    }

    pub fn augmented_dynamics(&self, x: &[f64], u: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.dims.state());
        self.augmented_dynamics_into(x, u, out.as_mut_slice());
        out
    }

    /// Analytic Jacobians `(∂f̄/∂x̄, ∂f̄/∂ū)` written into preallocated
    /// matrices of shape `(n, n)` and `(n, p)`.
    pub fn augmented_jacobians_into(
        &self,
        x: &[f64],
        u: &[f64],
        jx: &mut DMatrix<f64>,
        ju: &mut DMatrix<f64>,
    ) {
        let d = &self.dims;
        let w = &self.weights;
        let s = u[d.s_index()];
        let inv_mass = 1.0 / self.cfg.agent_mass;
        jx.fill(0.0);
        ju.fill(0.0);
        let mut grad = vec![0.0; d.nx];
        let viol = self.violation(x, Some(&mut grad));
        let yi = d.y_index();
        let wi = d.w_index();
        for i in 0..d.agents {
            let b = 9 * i;
            for k in 0..3 {
                jx[(b + k, b + 3 + k)] = s;
                jx[(b + 3 + k, b + 6 + k)] = s * inv_mass;
                jx[(wi, b + 6 + k)] = s * 2.0 * w.alpha3 * x[b + 6 + k];
                ju[(b + 6 + k, 3 * i + k)] = s;
                ju[(wi, 3 * i + k)] = s * 2.0 * w.alpha2 * u[3 * i + k];
            }
        }
        for (k, gk) in grad.iter().enumerate() {
            jx[(yi, k)] = s * gk;
        }
        // f̄ is linear in s, so its s-column is the unscaled vector field
        let mut col = vec![0.0; d.state()];
        let mut unit_s = u.to_vec();
        unit_s[d.s_index()] = 1.0;
        self.augmented_dynamics_into(x, &unit_s, &mut col);
        col[yi] = viol;
        for (r, v) in col.into_iter().enumerate() {
            ju[(r, d.s_index())] = v;
        }
    }

    pub fn augmented_jacobians(&self, x: &[f64], u: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.dims.state();
        let p = self.dims.input();
        let mut jx = DMatrix::zeros(n, n);
        let mut ju = DMatrix::zeros(n, p);
        self.augmented_jacobians_into(x, u, &mut jx, &mut ju);
        (jx, ju)
    }

    /// Input-side inequalities `G(ξ, η) = (y - γ; η - ū_max; -η + ū_min)`.
    pub fn input_inequalities(&self, xi: &[f64], eta: &[f64], gamma: f64) -> DVector<f64> {
        let d = &self.dims;
        let p = d.input();
        let lo = self.cfg.input_lower();
        let hi = self.cfg.input_upper();
        let mut g = DVector::zeros(d.n_big_g);
        g[0] = xi[d.y_index()] - gamma;
        for k in 0..p {
            g[1 + k] = eta[k] - hi[k];
            g[1 + p + k] = -eta[k] + lo[k];
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn model() -> Model {
        Model::new(&ScenarioConfig::demo(2).unwrap())
    }

    fn hover_state(m: &Model) -> Vec<f64> {
        let (x0, _) = m.config().boundary_augmented_states();
        x0.as_slice().to_vec()
    }

    #[test]
    fn hover_is_equilibrium() {
        let m = model();
        let a = AgentState::from_slice(&m.config().initial_state(0));
        assert_eq!(m.agent_dynamics(&a, &Vector3::zeros()), [0.0; 9]);
    }

    #[test]
    fn thrust_rate_passes_through() {
        let m = model();
        let a = AgentState::from_slice(&m.config().initial_state(0));
        let f = m.agent_dynamics(&a, &Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(f, [0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn full_thrust_acceleration() {
        let m = model();
        let mut a = AgentState::from_slice(&m.config().initial_state(0));
        a.thrust = Vector3::new(0.0, 0.0, 5.0);
        let f = m.agent_dynamics(&a, &Vector3::zeros());
        assert_eq!(&f[3..5], &[0.0, 0.0]);
        assert!((f[5] - (5.0 / 0.35 - 9.81)).abs() < 1e-14);
    }

    #[test]
    fn obstacle_entry_at_center_equals_radius() {
        let m = model();
        let mut x = hover_state(&m);
        x[0] = 5.0;
        x[1] = 8.0;
        let g = m.state_inequalities(&x);
        assert_eq!(g[10], 2.0);
    }

    #[test]
    fn vertical_thrust_satisfies_tilt() {
        let m = model();
        let x = hover_state(&m);
        let g = m.state_inequalities(&x);
        let tz = 0.35 * 9.81;
        let expected = (std::f64::consts::FRAC_PI_4.cos() - 1.0) * tz;
        assert!((g[9] - expected).abs() < 1e-15);
        assert!(g[9] < 0.0);
    }

    #[test]
    fn pair_at_exact_distance_is_zero() {
        let m = model();
        let mut x = hover_state(&m);
        let other = [x[0] + 0.6, x[1] + 0.8, x[2]];
        x[9..12].copy_from_slice(&other);
        let g = m.state_inequalities(&x);
        assert_eq!(g.len(), 25);
        assert!(g[24].abs() < 1e-15);
    }

    #[test]
    fn feasible_state_has_zero_violation_rate() {
        let m = model();
        let x = hover_state(&m);
        let mut u = vec![0.0; 7];
        u[6] = 7.0;
        let f = m.augmented_dynamics(&x, &u);
        assert_eq!(f[18], 0.0);
        let w = m.weights();
        let t2 = 2.0 * (0.35f64 * 9.81).powi(2);
        let expected = 7.0 * (2.0 * w.alpha1 + w.alpha3 * t2);
        assert!((f[19] - expected).abs() < 1e-15);
        assert!(f.rows(0, 18).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_dilation_freezes_everything() {
        let m = model();
        let mut x = hover_state(&m);
        x[0] = 5.0;
        x[1] = 8.0;
        let u = vec![1.0, -1.0, 0.5, 0.0, 2.0, 0.0, 0.0];
        assert!(m.augmented_dynamics(&x, &u).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_inequalities_at_bounds() {
        let m = model();
        let mut xi = hover_state(&m);
        let gamma = 1e-6;
        xi[18] = gamma;
        let hi = m.config().input_upper();
        let g = m.input_inequalities(&xi, hi.as_slice(), gamma);
        assert_eq!(g.len(), 15);
        assert!(g.rows(0, 8).iter().all(|&v| v == 0.0));
        xi[18] = gamma + 1.0;
        assert!((m.input_inequalities(&xi, hi.as_slice(), gamma)[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn input_inequalities_zero_rates() {
        let m = model();
        let xi = hover_state(&m);
        let mut eta = vec![0.0; 7];
        eta[6] = 7.0;
        let g = m.input_inequalities(&xi, &eta, 1e-6);
        for k in 0..6 {
            assert_eq!(g[1 + k], -2.0);
            assert_eq!(g[8 + k], -2.0);
        }
        assert_eq!(g[7], 7.0 - 28.0);
        assert_eq!(g[14], 0.0);
    }

    #[test]
    fn s_column_is_field_over_s() {
        let m = model();
        let mut x = hover_state(&m);
        x[0] = 5.5;
        x[1] = 7.0;
        x[3] = 2.5;
        let u = vec![0.3, -0.2, 0.1, 0.0, 0.4, -1.0, 9.0];
        let f = m.augmented_dynamics(&x, &u);
        let (_, ju) = m.augmented_jacobians(&x, &u);
        for r in 0..20 {
            assert!((ju[(r, 6)] - f[r] / 9.0).abs() < 1e-12 * (1.0 + f[r].abs()));
        }
    }

    #[test]
    fn agent_block_is_scaled_constant_matrix() {
        let m = model();
        let x = hover_state(&m);
        let s = 11.0;
        let u = vec![0.0, 0.0, 0.0, 0.0, 0.0, 0.0, s];
        let (jx, _) = m.augmented_jacobians(&x, &u);
        for i in 0..2 {
            for r in 0..9 {
                for c in 0..9 {
                    let expected = match (r, c) {
                        (0..=2, _) if c == r + 3 => s,
                        (3..=5, _) if c == r + 3 => s / 0.35,
                        _ => 0.0,
                    };
                    assert_eq!(jx[(9 * i + r, 9 * i + c)], expected);
                }
            }
        }
    }

    fn random_point(seed: &[f64]) -> (Vec<f64>, Vec<f64>) {
        // deliberately infeasible positions so the violation row is active
        let mut x = vec![0.0; 20];
        for i in 0..2 {
            for k in 0..3 {
                x[9 * i + k] = 7.0 + 4.0 * seed[k + 3 * i];
                x[9 * i + 3 + k] = 2.5 * seed[(k + 1) % 6];
                x[9 * i + 6 + k] = 1.5 * seed[(k + 2 + i) % 6];
            }
            x[9 * i + 8] += 3.4;
        }
        x[18] = 0.3;
        x[19] = 0.1;
        let mut u: Vec<f64> = (0..6).map(|k| 2.0 * seed[k]).collect();
        u.push(10.0 + 5.0 * seed[0]);
        (x, u)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn jacobians_match_central_differences(seed in proptest::collection::vec(-1.0f64..1.0, 6)) {
            let m = model();
            let (x, u) = random_point(&seed);
            let (jx, ju) = m.augmented_jacobians(&x, &u);
            let h = 1e-6;
            for c in 0..20 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[c] += h;
                xm[c] -= h;
                let fd = (m.augmented_dynamics(&xp, &u) - m.augmented_dynamics(&xm, &u)) / (2.0 * h);
                for r in 0..20 {
                    let err = (fd[r] - jx[(r, c)]).abs();
                    prop_assert!(err <= 1e-6 * (1.0 + jx[(r, c)].abs()), "dx r={} c={} fd={} an={}", r, c, fd[r], jx[(r, c)]);
                }
            }
            for c in 0..7 {
                let mut up = u.clone();
                let mut um = u.clone();
                up[c] += h;
                um[c] -= h;
                let fd = (m.augmented_dynamics(&x, &up) - m.augmented_dynamics(&x, &um)) / (2.0 * h);
                for r in 0..20 {
                    let err = (fd[r] - ju[(r, c)]).abs();
                    prop_assert!(err <= 1e-6 * (1.0 + ju[(r, c)].abs()), "du r={} c={}", r, c);
                }
            }
        }

        #[test]
        fn dilation_homogeneity(seed in proptest::collection::vec(-1.0f64..1.0, 6), a in 0.1f64..20.0) {
            let m = model();
            let (x, mut u) = random_point(&seed);
            u[6] = a;
            let f1 = m.augmented_dynamics(&x, &u);
            u[6] = 2.0 * a;
            let f2 = m.augmented_dynamics(&x, &u);
            for r in 0..20 {
                prop_assert!((f2[r] - 2.0 * f1[r]).abs() <= 1e-12 * (1.0 + f2[r].abs()));
            }
            prop_assert!(f1[18] >= 0.0);
            prop_assert!(f1[19] >= 0.0);
        }

        #[test]
        fn permutation_equivariance(seed in proptest::collection::vec(-1.0f64..1.0, 9)) {
            let cfg = ScenarioConfig::demo(3).unwrap();
            let m = Model::new(&cfg);
            let mut x = vec![0.0; 29];
            for i in 0..3 {
                for k in 0..3 {
                    x[9 * i + k] = 7.0 + 3.0 * seed[3 * i + k];
                    x[9 * i + 3 + k] = seed[(3 * i + k + 1) % 9];
                    x[9 * i + 6 + k] = seed[(3 * i + k + 2) % 9];
                }
                x[9 * i + 8] += 3.0;
            }
            // swap agents 0 and 2
            let mut xp = x.clone();
            for k in 0..9 {
                xp.swap(k, 18 + k);
            }
            let g = m.state_inequalities(&x);
            let gp = m.state_inequalities(&xp);
            let per = 12;
            for k in 0..per {
                prop_assert_eq!(g[k], gp[2 * per + k]);
                prop_assert_eq!(g[per + k], gp[per + k]);
            }
            // pairs (0,1),(0,2),(1,2) map to (2,1),(2,0),(1,0)
            let h = g.rows(3 * per, 3);
            let hp = gp.rows(3 * per, 3);
            prop_assert!((h[0] - hp[2]).abs() < 1e-12);
            prop_assert!((h[1] - hp[1]).abs() < 1e-12);
            prop_assert!((h[2] - hp[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn selectors_extract_positions_and_thrusts() {
        let m = model();
        let sel = SelectorMatrices::new(m.dims());
        let x = DVector::from_iterator(20, (0..20).map(|v| v as f64));
        let p = &sel.positions * &x;
        let t = &sel.thrusts * &x;
        assert_eq!(p.as_slice(), &[0.0, 1.0, 2.0, 9.0, 10.0, 11.0]);
        assert_eq!(t.as_slice(), &[6.0, 7.0, 8.0, 15.0, 16.0, 17.0]);
        for r in 0..6 {
            assert_eq!(sel.positions.row(r).sum(), 1.0);
            assert_eq!(sel.thrusts.row(r).sum(), 1.0);
        }
        assert_eq!(sel.planar.sum(), 2.0);
    }
}
