//! Dense operator-splitting QP solver.
//!
//! Solves `min ½ xᵀPx + qᵀx  s.t.  l ≤ Ax ≤ u` with ADMM on a Ruiz-equilibrated
//! copy of the problem, an adaptive penalty, over-relaxation, infeasibility
//! certificates from iterate differences and an optional active-set polish.
//! Equalities are rows with `l = u`; missing bounds are `±∞`.
//!
//! Badly scaled problems can stall ADMM; in [`QpMethod::Auto`] a stalled or
//! iteration-capped ADMM run is finished by a primal-dual interior-point
//! method.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub p: DMatrix<f64>,
    pub q: DVector<f64>,
    pub a: DMatrix<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    pub fn new(
        p: DMatrix<f64>,
        q: DVector<f64>,
        a: DMatrix<f64>,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Result<Self> {
        let n = q.len();
        let m = l.len();
        if p.shape() != (n, n) || a.shape() != (m, n) || u.len() != m {
            return Err(Error::Dimension(format!(
                "qp shapes: P {:?}, q {}, A {:?}, l {}, u {}",
                p.shape(),
                n,
                a.shape(),
                m,
                u.len()
            )));
        }
        if l.iter()
            .zip(u.iter())
            .any(|(lo, hi)| lo > hi || lo.is_nan() || hi.is_nan())
        {
            return Err(Error::Validation("qp bounds must satisfy l <= u".into()));
        }
        if p.iter()
            .chain(q.iter())
            .chain(a.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Validation("qp data must be finite".into()));
        }
        Ok(Self { p, q, a, l, u })
    }

    pub fn num_vars(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.l.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.p * x)) + self.q.dot(x)
    }

    /// Stationarity `‖Px + q + Aᵀy‖∞`.
    pub fn stationarity(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (&self.p * x + &self.q + self.a.tr_mul(y)).amax()
    }

    /// Distance of `Ax` to the box, `‖Ax - Π(Ax)‖∞`.
    pub fn primal_infeasibility(&self, x: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        (0..ax.len())
            .map(|i| (ax[i] - ax[i].clamp(self.l[i], self.u[i])).abs())
            .fold(0.0, f64::max)
    }

    /// Natural residual `‖Ax - Π(Ax + y)‖∞`; zero exactly when `Ax` is in the
    /// box, `y` lies in its normal cone and complementary slackness holds.
    pub fn complementarity(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let ax = &self.a * x;
        (0..ax.len())
            .map(|i| (ax[i] - (ax[i] + y[i]).clamp(self.l[i], self.u[i])).abs())
            .fold(0.0, f64::max)
    }

    /// Largest of stationarity, primal infeasibility and complementarity.
    pub fn kkt_residual(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.stationarity(x, y)
            .max(self.primal_infeasibility(x))
            .max(self.complementarity(x, y))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpMethod {
    Admm,
    InteriorPoint,
    /// ADMM, then interior point if ADMM stalls or hits `max_iter`.
    Auto,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QpSettings {
    pub method: QpMethod,
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    pub alpha: f64,
    pub scaling_iters: usize,
    pub adaptive_rho: bool,
    pub adaptive_rho_interval: usize,
    pub primal_infeasible_tol: f64,
    pub dual_infeasible_tol: f64,
    pub polish: bool,
    pub polish_delta: f64,
    pub polish_refine_iters: usize,
    /// Every this many iterations a polish is attempted; the solve stops
    /// early when the polished pair meets the termination test. Zero
    /// disables the attempts.
    pub polish_interval: usize,
    /// In `Auto` mode ADMM is abandoned when the normalized residual has not
    /// halved over this many iterations.
    pub stall_window: usize,
    pub ipm_max_iter: usize,
    /// Initial primal/dual pair.
    #[serde(skip)]
    pub warm_start: Option<(DVector<f64>, DVector<f64>)>,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            method: QpMethod::Auto,
            abs_tol: 1e-6,
            rel_tol: 1e-6,
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            scaling_iters: 10,
            adaptive_rho: true,
            adaptive_rho_interval: 25,
            primal_infeasible_tol: 1e-5,
            dual_infeasible_tol: 1e-5,
            polish: true,
            polish_delta: 1e-7,
            polish_refine_iters: 5,
            polish_interval: 50,
            stall_window: 1000,
            ipm_max_iter: 200,
            warm_start: None,
        }
    }
}

impl QpSettings {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            self.abs_tol,
            self.rel_tol,
            self.rho,
            self.sigma,
            self.primal_infeasible_tol,
            self.dual_infeasible_tol,
            self.polish_delta,
        ];
        if pos.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Validation(
                "qp tolerances and penalties must be > 0".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 2.0) {
            return Err(Error::Validation("qp relaxation must lie in (0, 2)".into()));
        }
        if self.max_iter == 0 || self.adaptive_rho_interval == 0 || self.ipm_max_iter == 0 {
            return Err(Error::Validation(
                "qp iteration limits must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIter,
    PrimalInfeasible,
    DualInfeasible,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            QpStatus::Solved => "solved",
            QpStatus::MaxIter => "max_iter",
            QpStatus::PrimalInfeasible => "primal_infeasible",
            QpStatus::DualInfeasible => "dual_infeasible",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of `l ≤ Ax ≤ u`: positive at an active upper bound.
    pub y: DVector<f64>,
    pub status: QpStatus,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// [`QpProblem::kkt_residual`] of the returned pair.
    pub kkt_residual: f64,
    pub polished: bool,
    pub objective: f64,
    /// Method that produced the returned pair.
    pub method: QpMethod,
}

const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQ_FACTOR: f64 = 1e3;

fn limit_norm(v: f64) -> f64 {
    if v < 1e-4 {
        1.0
    } else {
        v.min(1e4)
    }
}

struct Scaled {
    p: DMatrix<f64>,
    q: DVector<f64>,
    a: DMatrix<f64>,
    l: DVector<f64>,
    u: DVector<f64>,
    d: DVector<f64>,
    e: DVector<f64>,
    c: f64,
}

fn equilibrate(prob: &QpProblem, iters: usize) -> Scaled {
    let n = prob.num_vars();
    let m = prob.num_constraints();
    let mut p = prob.p.clone();
    let mut q = prob.q.clone();
    let mut a = prob.a.clone();
    let mut d = DVector::from_element(n, 1.0);
    let mut e = DVector::from_element(m, 1.0);
    let mut c = 1.0;
    for _ in 0..iters {
        let dx = DVector::from_fn(n, |j, _| {
            let np = p.column(j).amax();
            let na = if m > 0 { a.column(j).amax() } else { 0.0 };
            1.0 / limit_norm(np.max(na)).sqrt()
        });
        let dz = DVector::from_fn(m, |i, _| 1.0 / limit_norm(a.row(i).amax()).sqrt());
        for j in 0..n {
            for i in 0..n {
                p[(i, j)] *= dx[i] * dx[j];
            }
            for i in 0..m {
                a[(i, j)] *= dz[i] * dx[j];
            }
        }
        q.component_mul_assign(&dx);
        d.component_mul_assign(&dx);
        e.component_mul_assign(&dz);
        let mean_p = if n > 0 {
            (0..n).map(|j| p.column(j).amax()).sum::<f64>() / n as f64
        } else {
            0.0
        };
        let gamma = 1.0 / limit_norm(mean_p.max(q.amax()));
        p *= gamma;
        q *= gamma;
        c *= gamma;
    }
    let l = prob.l.component_mul(&e);
    let u = prob.u.component_mul(&e);
    Scaled {
        p,
        q,
        a,
        l,
        u,
        d,
        e,
        c,
    }
}

fn rho_vector(l: &DVector<f64>, u: &DVector<f64>, rho: f64) -> DVector<f64> {
    DVector::from_fn(l.len(), |i, _| {
        if l[i] == f64::NEG_INFINITY && u[i] == f64::INFINITY {
            RHO_MIN
        } else if u[i] - l[i] < 1e-4 * (1.0 + u[i].abs().max(l[i].abs())) {
            RHO_EQ_FACTOR * rho
        } else {
            rho
        }
    })
}

fn factor(s: &Scaled, sigma: f64, rho: &DVector<f64>) -> Result<Cholesky<f64, Dyn>> {
    let mut ar = s.a.clone();
    for (i, mut row) in ar.row_iter_mut().enumerate() {
        row *= rho[i];
    }
    let mut k = s.a.tr_mul(&ar);
    k += &s.p;
    for i in 0..k.nrows() {
        k[(i, i)] += sigma;
    }
    Cholesky::new(k)
        .ok_or_else(|| Error::Numerical("qp reduced system is not positive definite".into()))
}

struct Residuals {
    prim: f64,
    dual: f64,
    prim_scale: f64,
    dual_scale: f64,
}

fn residuals(
    s: &Scaled,
    ax: &DVector<f64>,
    z: &DVector<f64>,
    px: &DVector<f64>,
    aty: &DVector<f64>,
) -> Residuals {
    let mut prim: f64 = 0.0;
    let mut n_ax: f64 = 0.0;
    let mut n_z: f64 = 0.0;
    for i in 0..ax.len() {
        let inv = 1.0 / s.e[i];
        prim = prim.max(((ax[i] - z[i]) * inv).abs());
        n_ax = n_ax.max((ax[i] * inv).abs());
        n_z = n_z.max((z[i] * inv).abs());
    }
    let mut dual: f64 = 0.0;
    let mut n_px: f64 = 0.0;
    let mut n_aty: f64 = 0.0;
    let mut n_q: f64 = 0.0;
    for j in 0..px.len() {
        let inv = 1.0 / (s.d[j] * s.c);
        dual = dual.max(((px[j] + s.q[j] + aty[j]) * inv).abs());
        n_px = n_px.max((px[j] * inv).abs());
        n_aty = n_aty.max((aty[j] * inv).abs());
        n_q = n_q.max((s.q[j] * inv).abs());
    }
    Residuals {
        prim,
        dual,
        prim_scale: n_ax.max(n_z),
        dual_scale: n_px.max(n_aty).max(n_q),
    }
}

fn project(v: &mut DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) {
    for i in 0..v.len() {
        v[i] = v[i].clamp(l[i], u[i]);
    }
}

fn primal_certificate(
    prob: &QpProblem,
    s: &Scaled,
    dy: &DVector<f64>,
    at_dy: &DVector<f64>,
    tol: f64,
) -> bool {
    let dy_u = DVector::from_fn(dy.len(), |i, _| s.e[i] * dy[i] / s.c);
    let norm = dy_u.amax();
    if norm < 1e-30 {
        return false;
    }
    let lhs = (0..at_dy.len())
        .map(|j| (at_dy[j] / (s.d[j] * s.c)).abs())
        .fold(0.0, f64::max);
    if lhs > tol * norm {
        return false;
    }
    let mut support = 0.0;
    for i in 0..dy_u.len() {
        if dy_u[i] > 0.0 {
            support += prob.u[i] * dy_u[i];
        } else if dy_u[i] < 0.0 {
            support += prob.l[i] * dy_u[i];
        }
    }
    support < -tol * norm
}

fn dual_certificate(
    prob: &QpProblem,
    s: &Scaled,
    dx: &DVector<f64>,
    p_dx: &DVector<f64>,
    a_dx: &DVector<f64>,
    tol: f64,
) -> bool {
    let norm = (0..dx.len())
        .map(|j| (s.d[j] * dx[j]).abs())
        .fold(0.0, f64::max);
    if norm < 1e-30 {
        return false;
    }
    let pn = (0..dx.len())
        .map(|j| (p_dx[j] / (s.d[j] * s.c)).abs())
        .fold(0.0, f64::max);
    if pn > tol * norm {
        return false;
    }
    if s.q.dot(dx) / s.c > -tol * norm {
        return false;
    }
    (0..a_dx.len()).all(|i| {
        let v = a_dx[i] / s.e[i];
        let upper_ok = prob.u[i] == f64::INFINITY || v <= tol * norm;
        let lower_ok = prob.l[i] == f64::NEG_INFINITY || v >= -tol * norm;
        upper_ok && lower_ok
    })
}

/// Solves the QP. Errors are reserved for malformed input and numerical
/// breakdown; non-convergence and infeasibility are reported via the status.
pub fn solve_qp(prob: &QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    settings.validate()?;
    let n = prob.num_vars();
    let m = prob.num_constraints();
    if let Some((x0, y0)) = &settings.warm_start {
        if x0.len() != n || y0.len() != m {
            return Err(Error::Dimension(format!(
                "warm start has lengths {}/{}, problem has {n}/{m}",
                x0.len(),
                y0.len()
            )));
        }
    }
    match settings.method {
        QpMethod::Admm => admm(prob, settings, false),
        QpMethod::InteriorPoint => {
            interior_point(prob, settings, settings.warm_start.as_ref().map(|w| &w.0))
        }
        QpMethod::Auto => {
            let first = admm(prob, settings, true)?;
            if first.status != QpStatus::MaxIter {
                return Ok(first);
            }
            let second = interior_point(prob, settings, Some(&first.x))?;
            if second.status == QpStatus::Solved || second.kkt_residual < first.kkt_residual {
                Ok(second)
            } else {
                Ok(first)
            }
        }
    }
}

fn admm(prob: &QpProblem, settings: &QpSettings, stop_on_stall: bool) -> Result<QpSolution> {
    let n = prob.num_vars();
    let m = prob.num_constraints();
    let s = equilibrate(prob, settings.scaling_iters);

    let mut x = DVector::zeros(n);
    let mut y = DVector::zeros(m);
    if let Some((x0, y0)) = &settings.warm_start {
        x = x0.component_div(&s.d);
        y = y0.component_div(&s.e) * s.c;
    }
    let mut z = &s.a * &x;
    project(&mut z, &s.l, &s.u);

    let mut rho = settings.rho;
    let mut rho_vec = rho_vector(&s.l, &s.u, rho);
    let mut chol = factor(&s, settings.sigma, &rho_vec)?;
    let alpha = settings.alpha;
    let sigma = settings.sigma;

    let mut ax = &s.a * &x;
    let mut px = &s.p * &x;
    let mut aty = s.a.tr_mul(&y);
    let mut status = QpStatus::MaxIter;
    let mut iterations = settings.max_iter;
    let mut res = residuals(&s, &ax, &z, &px, &aty);
    let mut early = None;
    let mut stall_ref = f64::INFINITY;

    for k in 1..=settings.max_iter {
        let mut w = rho_vec.component_mul(&z);
        w -= &y;
        let mut rhs = x.clone() * sigma;
        rhs -= &s.q;
        rhs += s.a.tr_mul(&w);
        let xt = chol.solve(&rhs);
        if xt.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("qp iterate became non-finite".into()));
        }
        let zt = &s.a * &xt;

        let x_prev = x.clone();
        let y_prev = y.clone();
        let ax_prev = ax.clone();
        let px_prev = px.clone();
        let aty_prev = aty.clone();

        x = &xt * alpha + &x_prev * (1.0 - alpha);
        let zr = &zt * alpha + &z * (1.0 - alpha);
        let mut z_new = &zr + y.component_div(&rho_vec);
        project(&mut z_new, &s.l, &s.u);
        y += (&zr - &z_new).component_mul(&rho_vec);
        z = z_new;

        ax = &s.a * &x;
        px = &s.p * &x;
        aty = s.a.tr_mul(&y);
        res = residuals(&s, &ax, &z, &px, &aty);

        let eps_p = settings.abs_tol + settings.rel_tol * res.prim_scale;
        let eps_d = settings.abs_tol + settings.rel_tol * res.dual_scale;
        if res.prim <= eps_p && res.dual <= eps_d {
            status = QpStatus::Solved;
            iterations = k;
            break;
        }
        let dy = &y - &y_prev;
        if primal_certificate(
            prob,
            &s,
            &dy,
            &(&aty - &aty_prev),
            settings.primal_infeasible_tol,
        ) {
            status = QpStatus::PrimalInfeasible;
            iterations = k;
            break;
        }
        let dx = &x - &x_prev;
        if dual_certificate(
            prob,
            &s,
            &dx,
            &(&px - &px_prev),
            &(&ax - &ax_prev),
            settings.dual_infeasible_tol,
        ) {
            status = QpStatus::DualInfeasible;
            iterations = k;
            break;
        }

        if stop_on_stall && k % settings.stall_window == 0 {
            let score = (res.prim / eps_p).max(res.dual / eps_d);
            if score > 0.5 * stall_ref {
                iterations = k;
                break;
            }
            stall_ref = score;
        }

        if settings.polish && settings.polish_interval > 0 && k % settings.polish_interval == 0 {
            if let Some((cx, cy)) = polish_unscaled(prob, &s, &x, &z, &y, settings) {
                if meets_tolerance(prob, &cx, &cy, settings) {
                    early = Some((cx, cy));
                    status = QpStatus::Solved;
                    iterations = k;
                    break;
                }
            }
        }

        if settings.adaptive_rho && k % settings.adaptive_rho_interval == 0 {
            let num = res.prim / res.prim_scale.max(1e-30);
            let den = res.dual / res.dual_scale.max(1e-30);
            if num > 0.0 && den > 0.0 {
                let candidate = (rho * (num / den).sqrt()).clamp(RHO_MIN, RHO_MAX);
                if candidate > 5.0 * rho || candidate < 0.2 * rho {
                    rho = candidate;
                    rho_vec = rho_vector(&s.l, &s.u, rho);
                    chol = factor(&s, sigma, &rho_vec)?;
                }
            }
        }
    }

    let mut sol_x = x.component_mul(&s.d);
    let mut sol_y = y.component_mul(&s.e) / s.c;
    let mut kkt = prob.kkt_residual(&sol_x, &sol_y);
    let mut polished = false;
    let forced = early.is_some();
    let candidate = match early {
        Some(pair) => Some(pair),
        None if status == QpStatus::Solved && settings.polish => {
            polish_unscaled(prob, &s, &x, &z, &y, settings)
        }
        None => None,
    };
    if let Some((cx, cy)) = candidate {
        {
            let ck = prob.kkt_residual(&cx, &cy);
            if forced || (ck.is_finite() && ck < kkt) {
                sol_x = cx;
                sol_y = cy;
                kkt = ck;
                polished = true;
            }
        }
    }
    let (primal_residual, dual_residual) = if polished {
        (
            prob.primal_infeasibility(&sol_x),
            prob.stationarity(&sol_x, &sol_y),
        )
    } else {
        (res.prim, res.dual)
    };
    Ok(QpSolution {
        objective: prob.objective(&sol_x),
        x: sol_x,
        y: sol_y,
        status,
        iterations,
        primal_residual,
        dual_residual,
        kkt_residual: kkt,
        polished,
        method: QpMethod::Admm,
    })
}

fn polish_unscaled(
    prob: &QpProblem,
    s: &Scaled,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    settings: &QpSettings,
) -> Option<(DVector<f64>, DVector<f64>)> {
    if prob.num_constraints() == 0 {
        return None;
    }
    let (px, py) = polish(s, x, z, y, settings)?;
    Some((px.component_mul(&s.d), py.component_mul(&s.e) / s.c))
}

/// Termination test on an unscaled primal/dual pair, including the sign
/// conditions that ADMM iterates satisfy by construction.
fn meets_tolerance(
    prob: &QpProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    settings: &QpSettings,
) -> bool {
    let ax = &prob.a * x;
    let px = &prob.p * x;
    let aty = prob.a.tr_mul(y);
    let mut z = ax.clone();
    project(&mut z, &prob.l, &prob.u);
    let eps_p = settings.abs_tol + settings.rel_tol * ax.amax().max(z.amax());
    let eps_d = settings.abs_tol + settings.rel_tol * px.amax().max(aty.amax()).max(prob.q.amax());
    let stat = (&px + &prob.q + &aty).amax();
    stat <= eps_d && (&ax - &z).amax() <= eps_p && prob.complementarity(x, y) <= eps_p
}

/// Active-set refinement on the scaled problem. Rows with a single nonzero
/// fix their variable; the remaining active rows and free variables form a
/// regularized KKT system solved with iterative refinement.
fn polish(
    s: &Scaled,
    x: &DVector<f64>,
    z: &DVector<f64>,
    y: &DVector<f64>,
    settings: &QpSettings,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let n = x.len();
    let m = z.len();
    let delta = settings.polish_delta;
    let mut target = vec![None; m];
    for i in 0..m {
        if s.l[i] == s.u[i] || z[i] - s.l[i] < -y[i] {
            target[i] = Some(s.l[i]);
        } else if s.u[i] - z[i] < y[i] {
            target[i] = Some(s.u[i]);
        }
    }
    let mut fixed: Vec<Option<(usize, f64)>> = vec![None; n];
    let mut general = Vec::new();
    let mut singleton_rows = Vec::new();
    for i in 0..m {
        let Some(b) = target[i] else { continue };
        if !b.is_finite() {
            return None;
        }
        let row = s.a.row(i);
        let mut nz = row.iter().enumerate().filter(|(_, v)| **v != 0.0);
        let first = nz.next();
        let second = nz.next();
        match (first, second) {
            (Some((j, &aij)), None) => {
                if fixed[j].is_none() {
                    fixed[j] = Some((i, b / aij));
                    singleton_rows.push((i, j, aij));
                }
            }
            (Some(_), Some(_)) => general.push(i),
            (None, _) => {}
        }
    }
    let free: Vec<usize> = (0..n).filter(|&j| fixed[j].is_none()).collect();
    let mut xs = DVector::zeros(n);
    for j in 0..n {
        if let Some((_, v)) = fixed[j] {
            xs[j] = v;
        }
    }
    let nf = free.len();
    let ng = general.len();
    let dim = nf + ng;
    // true KKT on free variables and general rows
    let mut kkt = DMatrix::zeros(dim, dim);
    for (a, &ja) in free.iter().enumerate() {
        for (b, &jb) in free.iter().enumerate() {
            kkt[(a, b)] = s.p[(ja, jb)];
        }
    }
    for (r, &i) in general.iter().enumerate() {
        for (b, &jb) in free.iter().enumerate() {
            let v = s.a[(i, jb)];
            kkt[(nf + r, b)] = v;
            kkt[(b, nf + r)] = v;
        }
    }
    let px_fixed = &s.p * &xs;
    let ax_fixed = &s.a * &xs;
    let mut rhs = DVector::zeros(dim);
    for (a, &ja) in free.iter().enumerate() {
        rhs[a] = -s.q[ja] - px_fixed[ja];
    }
    for (r, &i) in general.iter().enumerate() {
        rhs[nf + r] = target[i].unwrap() - ax_fixed[i];
    }
    let mut reg = kkt.clone();
    for a in 0..nf {
        reg[(a, a)] += delta;
    }
    for r in 0..ng {
        reg[(nf + r, nf + r)] -= delta;
    }
    let mut sol = DVector::zeros(dim);
    if dim > 0 {
        let lu: LU<f64, Dyn, Dyn> = reg.lu();
        sol = lu.solve(&rhs)?;
        for _ in 0..settings.polish_refine_iters {
            let r = &rhs - &kkt * &sol;
            sol += lu.solve(&r)?;
        }
    }
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    for (a, &ja) in free.iter().enumerate() {
        xs[ja] = sol[a];
    }
    let mut ys = DVector::zeros(m);
    for (r, &i) in general.iter().enumerate() {
        ys[i] = sol[nf + r];
    }
    let grad = &s.p * &xs + &s.q + s.a.tr_mul(&ys);
    for &(i, j, aij) in &singleton_rows {
        ys[i] = -grad[j] / aij;
    }
    Some((xs, ys))
}

type SparseRow = Vec<(usize, f64)>;

fn sparse_rows(a: &DMatrix<f64>) -> Vec<SparseRow> {
    (0..a.nrows())
        .map(|i| {
            (0..a.ncols())
                .filter_map(|j| {
                    let v = a[(i, j)];
                    (v != 0.0).then_some((j, v))
                })
                .collect()
        })
        .collect()
}

fn row_dot(row: &SparseRow, x: &DVector<f64>) -> f64 {
    row.iter().map(|&(j, v)| v * x[j]).sum()
}

fn row_axpy(row: &SparseRow, alpha: f64, out: &mut DVector<f64>) {
    for &(j, v) in row {
        out[j] += alpha * v;
    }
}

fn cholesky_with_jitter(mut k: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let scale = (0..k.nrows()).map(|i| k[(i, i)].abs()).fold(1.0, f64::max);
    let mut jitter = 0.0;
    for _ in 0..8 {
        if let Some(c) = Cholesky::new(k.clone()) {
            return Ok(c);
        }
        let next = if jitter == 0.0 {
            1e-14 * scale
        } else {
            jitter * 100.0
        };
        for i in 0..k.nrows() {
            k[(i, i)] += next - jitter;
        }
        jitter = next;
    }
    Err(Error::Numerical(
        "interior-point system is not positive definite".into(),
    ))
}

/// `H = P + Σ w_j g_j g_jᵀ`, kept diagonal when the sparsity allows.
enum Hessian {
    Diagonal(DVector<f64>),
    Dense(Cholesky<f64, Dyn>),
}

impl Hessian {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match self {
            Hessian::Diagonal(d) => rhs.component_div(d),
            Hessian::Dense(c) => c.solve(rhs),
        }
    }
}

/// Mehrotra predictor-corrector on `min ½xᵀPx + qᵀx  s.t.  Cx = d, Gx ≤ h`,
/// where the rows of `C` are the equality rows of `A` and `G` stacks `a_i`
/// for finite upper and `-a_i` for finite lower bounds.
fn interior_point(
    prob: &QpProblem,
    settings: &QpSettings,
    x0: Option<&DVector<f64>>,
) -> Result<QpSolution> {
    let n = prob.num_vars();
    let m = prob.num_constraints();
    let rows = sparse_rows(&prob.a);
    let mut eq = Vec::new();
    let mut ineq: Vec<(usize, f64)> = Vec::new();
    for i in 0..m {
        if prob.l[i] == prob.u[i] {
            eq.push(i);
        } else {
            if prob.u[i].is_finite() {
                ineq.push((i, 1.0));
            }
            if prob.l[i].is_finite() {
                ineq.push((i, -1.0));
            }
        }
    }
    let me = eq.len();
    let mi = ineq.len();
    let d = DVector::from_iterator(me, eq.iter().map(|&i| prob.l[i]));
    let h = DVector::from_iterator(
        mi,
        ineq.iter()
            .map(|&(i, sg)| if sg > 0.0 { prob.u[i] } else { -prob.l[i] }),
    );
    let p_diagonal = (0..n).all(|j| (0..n).all(|i| i == j || prob.p[(i, j)] == 0.0));
    let diagonal = p_diagonal && ineq.iter().all(|&(i, _)| rows[i].len() <= 1);
    let mut col_lists: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (a, &i) in eq.iter().enumerate() {
        for &(j, v) in &rows[i] {
            col_lists[j].push((a, v));
        }
    }

    let g_mul = |x: &DVector<f64>| {
        DVector::from_iterator(mi, ineq.iter().map(|&(i, sg)| sg * row_dot(&rows[i], x)))
    };
    let gt_mul = |v: &DVector<f64>| {
        let mut out = DVector::zeros(n);
        for (j, &(i, sg)) in ineq.iter().enumerate() {
            row_axpy(&rows[i], sg * v[j], &mut out);
        }
        out
    };
    let c_mul =
        |x: &DVector<f64>| DVector::from_iterator(me, eq.iter().map(|&i| row_dot(&rows[i], x)));
    let ct_mul = |v: &DVector<f64>| {
        let mut out = DVector::zeros(n);
        for (a, &i) in eq.iter().enumerate() {
            row_axpy(&rows[i], v[a], &mut out);
        }
        out
    };

    let mut x = x0.cloned().unwrap_or_else(|| DVector::zeros(n));
    let gx = g_mul(&x);
    let mut sl = DVector::from_fn(mi, |j, _| (h[j] - gx[j]).max(1.0));
    let mut lam = DVector::from_element(mi, 1.0);
    let mut nu = DVector::zeros(me);
    let tol_abs = 1e-3 * settings.abs_tol;
    let tol_rel = 1e-3 * settings.rel_tol;
    let reg = 1e-12 * (1.0 + prob.p.amax());

    let assemble = |x: &DVector<f64>, nu: &DVector<f64>, lam: &DVector<f64>| {
        let mut y = DVector::zeros(m);
        for (a, &i) in eq.iter().enumerate() {
            y[i] += nu[a];
        }
        for (j, &(i, sg)) in ineq.iter().enumerate() {
            y[i] += sg * lam[j];
        }
        (x.clone(), y)
    };

    let mut iterations = settings.ipm_max_iter;
    let mut status = QpStatus::MaxIter;
    for it in 0..settings.ipm_max_iter {
        let px = &prob.p * &x;
        let rd = &px + &prob.q + ct_mul(&nu) + gt_mul(&lam);
        let re = c_mul(&x) - &d;
        let gx = g_mul(&x);
        let ri = &gx + &sl - &h;
        let mu = if mi > 0 {
            sl.dot(&lam) / mi as f64
        } else {
            0.0
        };
        // min(s, λ) bounds the natural residual; a small product alone does
        // not, since both factors can stall near sqrt(tol)
        let max_comp = sl.zip_map(&lam, f64::min).amax();
        let dual_scale = px
            .amax()
            .max(prob.q.amax())
            .max((ct_mul(&nu) + gt_mul(&lam)).amax());
        let prim_scale = gx.amax().max(h.amax()).max(d.amax());
        if rd.amax() <= tol_abs + tol_rel * dual_scale
            && re.amax().max(ri.amax()) <= tol_abs + tol_rel * prim_scale
            && max_comp <= 10.0 * tol_abs
        {
            status = QpStatus::Solved;
            iterations = it;
            break;
        }

        let w = lam.component_div(&sl);
        let hess = if diagonal {
            let mut dg = DVector::from_fn(n, |j, _| prob.p[(j, j)] + reg);
            for (j, &(i, _)) in ineq.iter().enumerate() {
                if let Some(&(c, v)) = rows[i].first() {
                    dg[c] += w[j] * v * v;
                }
            }
            Hessian::Diagonal(dg)
        } else {
            let mut hm = prob.p.clone();
            for (j, &(i, _)) in ineq.iter().enumerate() {
                for &(ca, va) in &rows[i] {
                    for &(cb, vb) in &rows[i] {
                        hm[(ca, cb)] += w[j] * va * vb;
                    }
                }
            }
            for j in 0..n {
                hm[(j, j)] += reg;
            }
            Hessian::Dense(cholesky_with_jitter(hm)?)
        };
        let schur = if me == 0 {
            None
        } else {
            let mut sm = DMatrix::zeros(me, me);
            match &hess {
                Hessian::Diagonal(dg) => {
                    for (j, list) in col_lists.iter().enumerate() {
                        for &(a, va) in list {
                            for &(b, vb) in list {
                                sm[(a, b)] += va * vb / dg[j];
                            }
                        }
                    }
                }
                Hessian::Dense(c) => {
                    let mut ct = DMatrix::zeros(n, me);
                    for (a, &i) in eq.iter().enumerate() {
                        for &(j, v) in &rows[i] {
                            ct[(j, a)] = v;
                        }
                    }
                    let hinv_ct = c.solve(&ct);
                    sm = ct.tr_mul(&hinv_ct);
                }
            }
            Some(cholesky_with_jitter(sm)?)
        };
        // Newton step for a given complementarity target r_c
        let newton = |rc: &DVector<f64>| {
            let t = (lam.component_mul(&ri) - rc).component_div(&sl);
            let rhs_x = -&rd - gt_mul(&t);
            let dnu = match &schur {
                Some(sc) => sc.solve(&(c_mul(&hess.solve(&rhs_x)) + &re)),
                None => DVector::zeros(0),
            };
            let dx = hess.solve(&(&rhs_x - ct_mul(&dnu)));
            let gdx = g_mul(&dx);
            let dlam = w.component_mul(&gdx) + &t;
            let ds = -&ri - &gdx;
            (dx, dnu, dlam, ds)
        };
        let max_step = |v: &DVector<f64>, dv: &DVector<f64>| {
            (0..v.len())
                .filter(|&j| dv[j] < 0.0)
                .map(|j| -v[j] / dv[j])
                .fold(1.0, f64::min)
        };

        let rc_aff = sl.component_mul(&lam);
        let (_, _, dlam_a, ds_a) = newton(&rc_aff);
        let a_aff = max_step(&sl, &ds_a).min(max_step(&lam, &dlam_a));
        let sigma = if mi > 0 {
            let mu_aff = (&sl + &ds_a * a_aff).dot(&(&lam + &dlam_a * a_aff)) / mi as f64;
            (mu_aff / mu).powi(3).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let rc = &rc_aff + ds_a.component_mul(&dlam_a) - DVector::from_element(mi, sigma * mu);
        let (dx, dnu, dlam, ds) = newton(&rc);
        let alpha = (0.99 * max_step(&sl, &ds).min(max_step(&lam, &dlam))).min(1.0);
        if !(alpha > 0.0) || dx.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("interior-point step failed".into()));
        }
        x += &dx * alpha;
        nu += &dnu * alpha;
        lam += &dlam * alpha;
        sl += &ds * alpha;
    }
    let (mut x, mut y) = assemble(&x, &nu, &lam);
    let mut polished = false;
    if settings.polish && m > 0 {
        let sc = equilibrate(prob, settings.scaling_iters);
        let xs = x.component_div(&sc.d);
        let ys = y.component_div(&sc.e) * sc.c;
        let zs = (&prob.a * &x).component_mul(&sc.e);
        if let Some((cx, cy)) = polish_unscaled(prob, &sc, &xs, &zs, &ys, settings) {
            let before = prob.kkt_residual(&x, &y);
            let after = prob.kkt_residual(&cx, &cy);
            if after.is_finite() && after < before {
                x = cx;
                y = cy;
                polished = true;
            }
        }
    }
    if status == QpStatus::Solved && !meets_tolerance(prob, &x, &y, settings) {
        status = QpStatus::MaxIter;
    }
    Ok(QpSolution {
        objective: prob.objective(&x),
        primal_residual: prob.primal_infeasibility(&x),
        dual_residual: prob.stationarity(&x, &y),
        kkt_residual: prob.kkt_residual(&x, &y),
        x,
        y,
        status,
        iterations,
        polished,
        method: QpMethod::InteriorPoint,
    })
}
