//! Adaptive Dormand–Prince 5(4) integration of the augmented dynamics and of
//! the variational equations.
//!
//! Sensitivities are propagated jointly with the state as one ODE
//! (`Φ̇_x = J_x Φ_x`, `Φ̇_u = J_x Φ_u + J_u`), so their accuracy is governed by
//! the same error control as the state itself. The clamp inside the violation
//! rate is not located by event detection; step-size control absorbs it.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::Model;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorSettings {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    /// First trial step as a fraction of the integration interval.
    pub initial_step: f64,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            abs_tol: 1e-9,
            max_steps: 100_000,
            initial_step: 0.01,
        }
    }
}

impl IntegratorSettings {
    pub fn with_tolerance(tol: f64) -> Self {
        Self {
            rel_tol: tol,
            abs_tol: tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |t: f64| t > 0.0 && t <= 1e-2;
        if !ok(self.rel_tol) || !ok(self.abs_tol) {
            return Err(Error::Validation(
                "integrator tolerances must lie in (0, 1e-2]".into(),
            ));
        }
        if self.max_steps == 0 {
            return Err(Error::Validation("max_steps must be at least 1".into()));
        }
        if !(self.initial_step > 0.0 && self.initial_step <= 1.0) {
            return Err(Error::Validation("initial_step must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

// Dormand–Prince tableau
const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// error coefficients: 5th-order minus embedded 4th-order weights
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

/// Integrates `ẏ = f(t, y)` from `t0` to `t1` in place. Returns the number
/// of accepted steps.
pub fn dopri5<F>(
    mut f: F,
    t0: f64,
    t1: f64,
    y: &mut [f64],
    settings: &IntegratorSettings,
) -> Result<usize>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    let n = y.len();
    let span = t1 - t0;
    if span == 0.0 {
        return Ok(0);
    }
    if !(span > 0.0) {
        return Err(Error::Validation(format!(
            "integration interval [{t0}, {t1}] must be increasing"
        )));
    }
    let mut k = vec![vec![0.0; n]; 7];
    let mut tmp = vec![0.0; n];
    let mut y_new = vec![0.0; n];

    let mut t = t0;
    let mut h = settings.initial_step * span;
    let h_min = 1e-14 * span.max(t0.abs()).max(1.0);
    f(t, y, &mut k[0]);
    let mut accepted = 0usize;
    let mut attempts = 0usize;
    while t < t1 {
        if attempts >= settings.max_steps {
            return Err(Error::StepLimit {
                max_steps: settings.max_steps,
                t,
            });
        }
        attempts += 1;
        let last = t + h >= t1 - 1e-12 * span;
        if last {
            h = t1 - t;
        }

        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k[0][i];
        }
        f(t + C2 * h, &tmp, &mut k[1]);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k[0][i] + A32 * k[1][i]);
        }
        f(t + C3 * h, &tmp, &mut k[2]);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k[0][i] + A42 * k[1][i] + A43 * k[2][i]);
        }
        f(t + C4 * h, &tmp, &mut k[3]);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k[0][i] + A52 * k[1][i] + A53 * k[2][i] + A54 * k[3][i]);
        }
        f(t + C5 * h, &tmp, &mut k[4]);
        for i in 0..n {
            tmp[i] = y[i]
                + h * (A61 * k[0][i]
                    + A62 * k[1][i]
                    + A63 * k[2][i]
                    + A64 * k[3][i]
                    + A65 * k[4][i]);
        }
        f(t + h, &tmp, &mut k[5]);
        for i in 0..n {
            y_new[i] = y[i]
                + h * (A71 * k[0][i]
                    + A73 * k[2][i]
                    + A74 * k[3][i]
                    + A75 * k[4][i]
                    + A76 * k[5][i]);
        }
        f(t + h, &y_new, &mut k[6]);

        let mut err_sq = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k[0][i]
                    + E3 * k[2][i]
                    + E4 * k[3][i]
                    + E5 * k[4][i]
                    + E6 * k[5][i]
                    + E7 * k[6][i]);
            let sc = settings.abs_tol + settings.rel_tol * y[i].abs().max(y_new[i].abs());
            err_sq += (e / sc) * (e / sc);
        }
        let err = (err_sq / n.max(1) as f64).sqrt();
        if !err.is_finite() {
            if y_new.iter().any(|v| !v.is_finite()) && h <= h_min {
                return Err(Error::NonFinite { t });
            }
            h *= 0.1;
            if h < h_min {
                return Err(Error::NonFinite { t });
            }
            continue;
        }

        if err <= 1.0 {
            t = if last { t1 } else { t + h };
            y.copy_from_slice(&y_new);
            k.swap(0, 6);
            accepted += 1;
            let fac = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h *= fac;
        } else {
            h *= (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
            if h < h_min {
                return Err(Error::StepLimit {
                    max_steps: settings.max_steps,
                    t,
                });
            }
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { t: t1 });
    }
    Ok(accepted)
}

/// Endpoint of the augmented dynamics over `[tau_a, tau_b]` under a constant
/// input.
pub fn integrate_state(
    model: &Model,
    x0: &DVector<f64>,
    eta: &DVector<f64>,
    tau_a: f64,
    tau_b: f64,
    settings: &IntegratorSettings,
) -> Result<DVector<f64>> {
    check_shapes(model, x0, eta)?;
    let mut y = x0.as_slice().to_vec();
    let u = eta.as_slice();
    dopri5(
        |_, x, dx| model.augmented_dynamics_into(x, u, dx),
        tau_a,
        tau_b,
        &mut y,
        settings,
    )?;
    Ok(DVector::from_vec(y))
}

/// States at `samples + 1` uniformly spaced points of `[tau_a, tau_b]`,
/// including both endpoints.
pub fn integrate_state_sampled(
    model: &Model,
    x0: &DVector<f64>,
    eta: &DVector<f64>,
    tau_a: f64,
    tau_b: f64,
    samples: usize,
    settings: &IntegratorSettings,
) -> Result<Vec<DVector<f64>>> {
    check_shapes(model, x0, eta)?;
    let samples = samples.max(1);
    let mut out = Vec::with_capacity(samples + 1);
    out.push(x0.clone());
    let mut y = x0.as_slice().to_vec();
    let u = eta.as_slice();
    let dt = (tau_b - tau_a) / samples as f64;
    for j in 0..samples {
        let a = tau_a + j as f64 * dt;
        let b = if j + 1 == samples { tau_b } else { a + dt };
        dopri5(
            |_, x, dx| model.augmented_dynamics_into(x, u, dx),
            a,
            b,
            &mut y,
            settings,
        )?;
        out.push(DVector::from_column_slice(&y));
    }
    Ok(out)
}

/// State and sensitivities at the end of one interval.
#[derive(Clone, Debug)]
pub struct SensitivityBundle {
    pub state: DVector<f64>,
    /// `∂x̄(τ_b)/∂ξ`.
    pub phi_x: DMatrix<f64>,
    /// `∂x̄(τ_b)/∂η`.
    pub phi_u: DMatrix<f64>,
}

/// Jointly integrates the state and the variational equations from
/// `Φ_x = I`, `Φ_u = 0` at `tau_a`.
pub fn integrate_sensitivities(
    model: &Model,
    xi: &DVector<f64>,
    eta: &DVector<f64>,
    tau_a: f64,
    tau_b: f64,
    settings: &IntegratorSettings,
) -> Result<SensitivityBundle> {
    check_shapes(model, xi, eta)?;
    let n = model.dims().state();
    let p = model.dims().input();
    let u = eta.as_slice();
    let len = n + n * n + n * p;
    let mut y = vec![0.0; len];
    y[..n].copy_from_slice(xi.as_slice());
    for i in 0..n {
        y[n + i * n + i] = 1.0;
    }

    let mut jx = DMatrix::zeros(n, n);
    let mut ju = DMatrix::zeros(n, p);
    let mut nz: Vec<(usize, usize, f64)> = Vec::with_capacity(4 * n);
    let rhs = |_: f64, state: &[f64], d: &mut [f64]| {
        let x = &state[..n];
        model.augmented_dynamics_into(x, u, &mut d[..n]);
        model.augmented_jacobians_into(x, u, &mut jx, &mut ju);
        nz.clear();
        for c in 0..n {
            for r in 0..n {
                let v = jx[(r, c)];
                if v != 0.0 {
                    nz.push((r, c, v));
                }
            }
        }
        // columns of [Φ_x Φ_u] are contiguous blocks of length n
        let cols = n + p;
        let phi = &state[n..];
        let dphi = &mut d[n..];
        dphi.fill(0.0);
        for col in 0..cols {
            let src = &phi[col * n..(col + 1) * n];
            let dst = &mut dphi[col * n..(col + 1) * n];
            for &(r, c, v) in &nz {
                dst[r] += v * src[c];
            }
            if col >= n {
                let uc = col - n;
                for r in 0..n {
                    dst[r] += ju[(r, uc)];
                }
            }
        }
    };
    dopri5(rhs, tau_a, tau_b, &mut y, settings)?;

    Ok(SensitivityBundle {
        state: DVector::from_column_slice(&y[..n]),
        phi_x: DMatrix::from_column_slice(n, n, &y[n..n + n * n]),
        phi_u: DMatrix::from_column_slice(n, p, &y[n + n * n..]),
    })
}

fn check_shapes(model: &Model, x: &DVector<f64>, eta: &DVector<f64>) -> Result<()> {
    let d = model.dims();
    if x.len() != d.state() || eta.len() != d.input() {
        return Err(Error::Dimension(format!(
            "expected state {} and input {}, got {} and {}",
            d.state(),
            d.input(),
            x.len(),
            eta.len()
        )));
    }
    Ok(())
}
