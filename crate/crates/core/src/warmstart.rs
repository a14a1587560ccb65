//! Filter-based warm starts.
//!
//! The free-final-time problem is approximated by a tracking problem whose
//! per-step costs are read as Gaussian observation likelihoods; a particle
//! filter built on the unscented transform then samples trajectories, and
//! the particle with the lowest tracking cost plus dynamics defect is handed
//! to the SCP loop.

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Model, SelectorMatrices};
use crate::error::{Error, Result};
use crate::integrator::IntegratorSettings;
use crate::linalg;
use crate::transcription::{self, DiscreteTrajectory, Grid};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtSettings {
    /// Sigma-point spread.
    pub theta: f64,
}

impl Default for UtSettings {
    fn default() -> Self {
        Self { theta: 0.1 }
    }
}

impl UtSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return Err(Error::Validation("theta must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn lambda(&self, n: usize) -> f64 {
        (self.theta * self.theta - 1.0) * n as f64
    }

    /// Mean weights `a` and covariance weights `b`, center first.
    pub fn weights(&self, n: usize) -> (Vec<f64>, Vec<f64>) {
        // n + λ = θ²n; the center weight λ/(n+λ) is taken as the complement
        // of the others so the vector sums to one up to a single rounding
        let t2 = self.theta * self.theta;
        let side = 0.5 / (t2 * n as f64);
        let mut a = vec![side; 2 * n + 1];
        let mut b = a.clone();
        a[0] = 1.0 - 2.0 * n as f64 * side;
        b[0] = a[0] + (3.0 - t2);
        (a, b)
    }
}

#[derive(Clone, Debug)]
pub struct UtOutput {
    pub mean: DVector<f64>,
    /// Output covariance plus the additive term.
    pub cov: DMatrix<f64>,
    /// Input-output cross-covariance.
    pub cross: DMatrix<f64>,
}

/// Unscented transform of `f` at mean `x` with covariance `a1`; `a2` is
/// added to the output covariance.
pub fn unscented_transform<F>(
    x: &DVector<f64>,
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    mut f: F,
    settings: &UtSettings,
) -> Result<UtOutput>
where
    F: FnMut(&DVector<f64>) -> Result<DVector<f64>>,
{
    let n = x.len();
    if a1.shape() != (n, n) {
        return Err(Error::Dimension(format!(
            "UT covariance is {:?}, mean has {n}",
            a1.shape()
        )));
    }
    let (a, b) = settings.weights(n);
    let root = linalg::jittered_cholesky(&linalg::symmetrize(a1))?;
    let spread = settings.theta * (n as f64).sqrt();
    let mut points = Vec::with_capacity(2 * n + 1);
    points.push(x.clone());
    for j in 0..n {
        points.push(x + root.column(j) * spread);
    }
    for j in 0..n {
        points.push(x - root.column(j) * spread);
    }
    let images = points.iter().map(&mut f).collect::<Result<Vec<_>>>()?;
    let l = images[0].len();
    if a2.shape() != (l, l) {
        return Err(Error::Dimension(format!(
            "UT additive covariance is {:?}, output has {l}",
            a2.shape()
        )));
    }
    let mut mean = DVector::zeros(l);
    for (w, y) in a.iter().zip(&images) {
        mean.axpy(*w, y, 1.0);
    }
    let mut cov = a2.clone();
    let mut cross = DMatrix::zeros(n, l);
    for ((w, y), p) in b.iter().zip(&images).zip(&points) {
        let dy = y - &mean;
        let dx = p - x;
        cov.ger(*w, &dy, &dy, 1.0);
        cross.ger(*w, &dx, &dy, 1.0);
    }
    Ok(UtOutput { mean, cov, cross })
}

/// Tracking-form approximation read as a state-space model over
/// `χ = (ξ, η)`.
#[derive(Clone, Debug)]
pub struct DualityModel {
    pub nodes: usize,
    pub epsilon: f64,
    pub nu: f64,
    pub gamma: f64,
    /// Reference positions `x̂_k`, one per node.
    pub reference_positions: Vec<DVector<f64>>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    /// `(0, t_min)`.
    pub eta_hat: DVector<f64>,
    /// Process noise `blkdiag(0, R⁻¹)`.
    pub process_cov: DMatrix<f64>,
    /// Measurement noise `blkdiag(Q⁻¹, I)`.
    pub measurement_cov: DMatrix<f64>,
    selectors: SelectorMatrices,
    state_dim: usize,
    input_dim: usize,
    n_big_g: usize,
}

impl DualityModel {
    pub fn new(model: &Model, grid: &Grid, gamma: f64, epsilon: f64, nu: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Validation("epsilon must lie in (0, 1)".into()));
        }
        if !(nu > 0.0) || !(gamma > 0.0) {
            return Err(Error::Validation("nu and gamma must be > 0".into()));
        }
        let d = model.dims();
        let cfg = model.config();
        let w = model.weights();
        let sel = SelectorMatrices::new(d);
        let (x0, xf) = cfg.boundary_augmented_states();
        let p0 = &sel.positions * &x0;
        let pf = &sel.positions * &xf;
        let n = grid.nodes();
        let reference_positions = (0..n)
            .map(|k| {
                let t = k as f64 / (n - 1) as f64;
                &p0 * (1.0 - t) + &pf * t
            })
            .collect();
        let q = DMatrix::identity(6 * d.agents, 6 * d.agents);
        let nu_in = d.input();
        let mut r = DMatrix::identity(nu_in, nu_in) * (w.alpha2 / w.alpha3);
        r[(nu_in - 1, nu_in - 1)] = w.alpha1 / (w.alpha3 * cfg.time_max);
        let mut eta_hat = DVector::zeros(nu_in);
        eta_hat[nu_in - 1] = cfg.time_min;
        let ns = d.state();
        let nc = ns + nu_in;
        let mut process_cov = DMatrix::zeros(nc, nc);
        let r_inv = r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("R is singular".into()))?;
        process_cov
            .view_mut((ns, ns), (nu_in, nu_in))
            .copy_from(&r_inv);
        let nq = 6 * d.agents;
        let mut measurement_cov = DMatrix::identity(nq + d.n_big_g, nq + d.n_big_g);
        let q_inv = q
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("Q is singular".into()))?;
        measurement_cov.view_mut((0, 0), (nq, nq)).copy_from(&q_inv);
        Ok(Self {
            nodes: n,
            epsilon,
            nu,
            gamma,
            reference_positions,
            q,
            r,
            eta_hat,
            process_cov,
            measurement_cov,
            selectors: sel,
            state_dim: ns,
            input_dim: nu_in,
            n_big_g: d.n_big_g,
        })
    }

    pub fn chi_dim(&self) -> usize {
        self.state_dim + self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.q.nrows() + self.n_big_g
    }

    fn decay(&self, k: usize) -> f64 {
        self.epsilon.powf((self.nodes - 1 - k) as f64 / 2.0)
    }

    /// `C_k`: scaled position selector stacked over the thrust selector.
    pub fn output_matrix(&self, k: usize) -> DMatrix<f64> {
        let p = self.selectors.positions.nrows();
        let mut c = DMatrix::zeros(2 * p, self.state_dim);
        c.rows_mut(0, p)
            .copy_from(&(&self.selectors.positions * self.decay(k)));
        c.rows_mut(p, p).copy_from(&self.selectors.thrusts);
        c
    }

    /// `ŷ_k = (ε^{(N-k)/2} x̂_k, 0)`.
    pub fn tracking_target(&self, k: usize) -> DVector<f64> {
        let p = self.selectors.positions.nrows();
        let mut y = DVector::zeros(2 * p);
        y.rows_mut(0, p)
            .copy_from(&(&self.reference_positions[k] * self.decay(k)));
        y
    }

    /// `ỹ_k = (ŷ_k, -ν 1)`.
    pub fn target(&self, k: usize) -> DVector<f64> {
        let t = self.tracking_target(k);
        let mut y = DVector::from_element(self.output_dim(), -self.nu);
        y.rows_mut(0, t.len()).copy_from(&t);
        y
    }

    pub fn split<'a>(&self, chi: &'a DVector<f64>) -> (&'a [f64], &'a [f64]) {
        chi.as_slice().split_at(self.state_dim)
    }

    /// `φ_k(χ) = (F_k(ξ, η), η̂)`.
    pub fn transition(
        &self,
        model: &Model,
        grid: &Grid,
        k: usize,
        chi: &DVector<f64>,
        settings: &IntegratorSettings,
    ) -> Result<DVector<f64>> {
        let (xi, eta) = self.split(chi);
        let next = transcription::shoot(
            model,
            grid,
            k,
            &DVector::from_column_slice(xi),
            &DVector::from_column_slice(eta),
            settings,
        )?;
        let mut out = DVector::zeros(self.chi_dim());
        out.rows_mut(0, self.state_dim).copy_from(&next);
        out.rows_mut(self.state_dim, self.input_dim)
            .copy_from(&self.eta_hat);
        Ok(out)
    }

    /// `ψ_k(χ) = (C_k ξ, [G(ξ, η)]₊)`.
    pub fn output(&self, model: &Model, k: usize, chi: &DVector<f64>) -> DVector<f64> {
        let (xi, eta) = self.split(chi);
        let c = self.output_matrix(k);
        let cx = c * DVector::from_column_slice(xi);
        let g = model.input_inequalities(xi, eta, self.gamma);
        let mut out = DVector::zeros(self.output_dim());
        out.rows_mut(0, cx.len()).copy_from(&cx);
        for (i, v) in g.iter().enumerate() {
            out[cx.len() + i] = v.max(0.0);
        }
        out
    }

    /// Selection score of one particle history (`N` entries of `χ`).
    pub fn particle_score(
        &self,
        model: &Model,
        grid: &Grid,
        history: &[DVector<f64>],
        settings: &IntegratorSettings,
    ) -> Result<f64> {
        let mut total = 0.0;
        for (k, chi) in history.iter().enumerate() {
            let (xi, eta) = self.split(chi);
            let e =
                self.tracking_target(k) - self.output_matrix(k) * DVector::from_column_slice(xi);
            total += e.dot(&(&self.q * &e));
            let g = model.input_inequalities(xi, eta, self.gamma);
            total += g
                .iter()
                .map(|v| (v.max(0.0) + self.nu).powi(2))
                .sum::<f64>();
            let de = DVector::from_column_slice(eta) - &self.eta_hat;
            total += de.dot(&(&self.r * &de));
        }
        for k in 0..history.len().saturating_sub(1) {
            let next = self.transition(model, grid, k, &history[k], settings)?;
            let (xi_next, _) = self.split(&history[k + 1]);
            total += (0..self.state_dim)
                .map(|i| (next[i] - xi_next[i]).abs())
                .sum::<f64>();
        }
        Ok(total)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FilterSettings {
    pub particles: usize,
    /// Initial covariance `σ² I`.
    pub initial_variance: f64,
    /// Variance of the random bias.
    pub alpha: f64,
    /// Resampling threshold.
    pub kappa: f64,
    pub epsilon: f64,
    pub nu: f64,
    pub ut: UtSettings,
    pub seed: u64,
    pub integrator: IntegratorSettings,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            particles: 30,
            initial_variance: 1e-2,
            alpha: 5e-3,
            kappa: 9.0,
            epsilon: 0.5,
            nu: 1.0,
            ut: UtSettings::default(),
            seed: 0,
            integrator: IntegratorSettings::default(),
        }
    }
}

impl FilterSettings {
    pub fn validate(&self) -> Result<()> {
        if self.particles == 0 {
            return Err(Error::Validation("need at least one particle".into()));
        }
        if !(self.initial_variance >= 0.0) || !(self.alpha >= 0.0) || !(self.kappa > 0.0) {
            return Err(Error::Validation(
                "initial variance and alpha must be >= 0, kappa > 0".into(),
            ));
        }
        self.ut.validate()?;
        self.integrator.validate()
    }
}

#[derive(Clone, Debug)]
pub struct Particle {
    /// `χ_1, …, χ_k`.
    pub history: Vec<DVector<f64>>,
    pub covariance: DMatrix<f64>,
    pub weight: f64,
    rng: ChaCha8Rng,
}

#[derive(Clone, Debug)]
pub struct ParticleEnsemble {
    pub particles: Vec<Particle>,
    resample_rng: ChaCha8Rng,
}

/// Stream index reserved for resampling draws.
const RESAMPLE_STREAM: u64 = u64::MAX;

impl ParticleEnsemble {
    /// All particles start at `(x̄_0, η̂)` with covariance `σ² I`; particle
    /// `l` draws from stream `l` of the seeded generator.
    pub fn new(model: &Model, duality: &DualityModel, settings: &FilterSettings) -> Self {
        let (x0, _) = model.config().boundary_augmented_states();
        let mut chi = DVector::zeros(duality.chi_dim());
        chi.rows_mut(0, x0.len()).copy_from(&x0);
        chi.rows_mut(x0.len(), duality.eta_hat.len())
            .copy_from(&duality.eta_hat);
        let n = duality.chi_dim();
        let np = settings.particles;
        let particles = (0..np)
            .map(|l| {
                let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
                rng.set_stream(l as u64);
                Particle {
                    history: vec![chi.clone()],
                    covariance: DMatrix::identity(n, n) * settings.initial_variance,
                    weight: 1.0 / np as f64,
                    rng,
                }
            })
            .collect();
        let mut resample_rng = ChaCha8Rng::seed_from_u64(settings.seed);
        resample_rng.set_stream(RESAMPLE_STREAM);
        Self {
            particles,
            resample_rng,
        }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.particles[0].history.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.particles.iter().map(|p| p.weight).collect()
    }

    /// `1 / Σ ω²`.
    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self
            .particles
            .iter()
            .map(|p| p.weight * p.weight)
            .sum::<f64>()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub effective_sample_size: f64,
    pub weight_sum_error: f64,
    pub resampled: bool,
    /// Smallest eigenvalue of any updated covariance before repair.
    pub min_eigenvalue_before_repair: f64,
    /// Smallest eigenvalue of any stored covariance.
    pub min_eigenvalue_after_repair: f64,
    /// Predicted covariances that needed eigenvalue clipping before their
    /// square root could be taken.
    pub predicted_covariance_repairs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterDiagnostics {
    pub steps: Vec<StepDiagnostics>,
}

impl FilterDiagnostics {
    pub fn resample_events(&self) -> usize {
        self.steps.iter().filter(|s| s.resampled).count()
    }
}

struct ParticleUpdate {
    chi: DVector<f64>,
    covariance: DMatrix<f64>,
    log_likelihood: f64,
    min_eig_before: f64,
    min_eig_after: f64,
    repaired_prediction: bool,
}

fn update_particle(
    model: &Model,
    grid: &Grid,
    duality: &DualityModel,
    settings: &FilterSettings,
    k: usize,
    particle: &mut Particle,
) -> Result<ParticleUpdate> {
    let chi = particle.history.last().expect("nonempty history");
    let pred = unscented_transform(
        chi,
        &particle.covariance,
        &duality.process_cov,
        |x| duality.transition(model, grid, k, x, &settings.integrator),
        &settings.ut,
    )?;
    let mu = pred.mean;
    let mut m = linalg::symmetrize(&pred.cov);
    let psi = |x: &DVector<f64>| Ok(duality.output(model, k + 1, x));
    let (meas, repaired_prediction) =
        match unscented_transform(&mu, &m, &duality.measurement_cov, psi, &settings.ut) {
            Ok(o) => (o, false),
            Err(Error::IndefiniteCovariance(_)) => {
                m = linalg::clip_to_psd(&m);
                (
                    unscented_transform(&mu, &m, &duality.measurement_cov, psi, &settings.ut)?,
                    true,
                )
            }
            Err(e) => return Err(e),
        };
    let u = linalg::symmetrize(&meas.cov);
    let lu = linalg::jittered_cholesky(&u)?;
    let chol = nalgebra::Cholesky::new(&lu * lu.transpose())
        .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
    // K = V U⁻¹, so Kᵀ = U⁻¹ Vᵀ
    let kt = chol.solve(&meas.cross.transpose());
    let gain = kt.transpose();
    let raw = &m - &gain * &meas.cross.transpose();
    let min_eig_before = linalg::min_eigenvalue(&raw);
    let covariance = linalg::clip_to_psd(&raw);
    let min_eig_after = linalg::min_eigenvalue(&covariance);
    let innovation = duality.target(k + 1) - &meas.mean;
    let n = chi.len();
    let z = DVector::from_fn(n, |_, _| {
        let s: f64 = StandardNormal.sample(&mut particle.rng);
        s * settings.alpha.sqrt()
    });
    let root = linalg::jittered_cholesky(&covariance)?;
    let next = &mu + &gain * &innovation + root * z;
    let log_det: f64 = 2.0 * lu.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let maha = innovation.dot(&chol.solve(&innovation));
    Ok(ParticleUpdate {
        chi: next,
        covariance,
        log_likelihood: -0.5 * log_det - 0.5 * maha,
        min_eig_before,
        min_eig_after,
        repaired_prediction,
    })
}

/// Advances every particle from node `k` to node `k + 1` and normalizes the
/// weights. Particles are processed in parallel; each uses its own stream.
pub fn filter_step(
    ensemble: &mut ParticleEnsemble,
    k: usize,
    model: &Model,
    grid: &Grid,
    duality: &DualityModel,
    settings: &FilterSettings,
) -> Result<StepDiagnostics> {
    if k + 1 >= grid.nodes() || ensemble.steps() != k + 1 {
        return Err(Error::Validation(format!(
            "filter step {k} does not match ensemble with {} nodes",
            ensemble.steps()
        )));
    }
    let updates: Vec<ParticleUpdate> = ensemble
        .particles
        .par_iter_mut()
        .map(|p| update_particle(model, grid, duality, settings, k, p))
        .collect::<Result<_>>()?;
    let log_w: Vec<f64> = ensemble
        .particles
        .iter()
        .zip(&updates)
        .map(|(p, u)| p.weight.ln() + u.log_likelihood)
        .collect();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(format!(
            "particle log-weights degenerate at step {k}"
        )));
    }
    let raw: Vec<f64> = log_w.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = raw.iter().sum();
    let mut diag = StepDiagnostics {
        step: k + 1,
        min_eigenvalue_before_repair: f64::INFINITY,
        min_eigenvalue_after_repair: f64::INFINITY,
        ..StepDiagnostics::default()
    };
    for ((p, u), w) in ensemble.particles.iter_mut().zip(updates).zip(raw) {
        p.history.push(u.chi);
        p.covariance = u.covariance;
        p.weight = w / total;
        diag.min_eigenvalue_before_repair = diag.min_eigenvalue_before_repair.min(u.min_eig_before);
        diag.min_eigenvalue_after_repair = diag.min_eigenvalue_after_repair.min(u.min_eig_after);
        diag.predicted_covariance_repairs += u.repaired_prediction as usize;
    }
    diag.weight_sum_error = (ensemble.particles.iter().map(|p| p.weight).sum::<f64>() - 1.0).abs();
    diag.effective_sample_size = ensemble.effective_sample_size();
    Ok(diag)
}

/// Multinomial resampling when `κ Σ ω² ≥ 1`; histories and covariances are
/// copied and weights reset to uniform. Returns whether it fired. A single
/// particle is never resampled since the draw would be the identity.
pub fn maybe_resample(ensemble: &mut ParticleEnsemble, kappa: f64) -> Result<bool> {
    let w = ensemble.weights();
    if w.len() < 2 || kappa * w.iter().map(|v| v * v).sum::<f64>() < 1.0 {
        return Ok(false);
    }
    let dist =
        WeightedIndex::new(&w).map_err(|e| Error::Numerical(format!("resampling weights: {e}")))?;
    let picks: Vec<usize> = (0..w.len())
        .map(|_| dist.sample(&mut ensemble.resample_rng))
        .collect();
    let old: Vec<(Vec<DVector<f64>>, DMatrix<f64>)> = ensemble
        .particles
        .iter()
        .map(|p| (p.history.clone(), p.covariance.clone()))
        .collect();
    let uniform = 1.0 / w.len() as f64;
    for (p, &j) in ensemble.particles.iter_mut().zip(&picks) {
        p.history = old[j].0.clone();
        p.covariance = old[j].1.clone();
        p.weight = uniform;
    }
    Ok(true)
}

/// Runs the filter over all nodes.
pub fn run_filter(
    model: &Model,
    grid: &Grid,
    duality: &DualityModel,
    settings: &FilterSettings,
) -> Result<(ParticleEnsemble, FilterDiagnostics)> {
    settings.validate()?;
    let mut ens = ParticleEnsemble::new(model, duality, settings);
    let mut diag = FilterDiagnostics::default();
    for k in 0..grid.intervals() {
        let mut step = filter_step(&mut ens, k, model, grid, duality, settings)?;
        step.resampled = maybe_resample(&mut ens, settings.kappa)?;
        diag.steps.push(step);
    }
    Ok((ens, diag))
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f64>,
    pub trajectory: DiscreteTrajectory,
}

/// Scores every particle and extracts the best one; ties go to the lowest
/// index. The input block of the last node is dropped.
pub fn select_particle(
    ensemble: &ParticleEnsemble,
    model: &Model,
    grid: &Grid,
    duality: &DualityModel,
    settings: &IntegratorSettings,
) -> Result<Selection> {
    if ensemble.is_empty() || ensemble.steps() != grid.nodes() {
        return Err(Error::Validation(
            "ensemble histories must cover every node".into(),
        ));
    }
    let scores: Vec<f64> = ensemble
        .particles
        .par_iter()
        .map(|p| duality.particle_score(model, grid, &p.history, settings))
        .collect::<Result<_>>()?;
    let mut index = 0;
    for (l, s) in scores.iter().enumerate() {
        if *s < scores[index] || (scores[index].is_nan() && !s.is_nan()) {
            index = l;
        }
    }
    let hist = &ensemble.particles[index].history;
    let states = hist
        .iter()
        .map(|c| DVector::from_column_slice(duality.split(c).0))
        .collect();
    let inputs = hist[..hist.len() - 1]
        .iter()
        .map(|c| DVector::from_column_slice(duality.split(c).1))
        .collect();
    Ok(Selection {
        index,
        scores,
        trajectory: DiscreteTrajectory { states, inputs },
    })
}

#[derive(Clone, Debug)]
pub struct WarmStart {
    pub selection: Selection,
    pub diagnostics: FilterDiagnostics,
}

/// Filter plus selection with default tracking parameters taken from
/// `settings`.
pub fn generate_warm_start(
    model: &Model,
    grid: &Grid,
    gamma: f64,
    settings: &FilterSettings,
) -> Result<WarmStart> {
    let duality = DualityModel::new(model, grid, gamma, settings.epsilon, settings.nu)?;
    let (ens, diagnostics) = run_filter(model, grid, &duality, settings)?;
    let selection = select_particle(&ens, model, grid, &duality, &settings.integrator)?;
    Ok(WarmStart {
        selection,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ScenarioConfig;
    use proptest::prelude::*;

    fn affine_case(
        n: usize,
        l: usize,
        seed: u64,
    ) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> f64 { StandardNormal.sample(&mut rng) };
        let x = DVector::from_fn(n, |_, _| draw());
        let g = DMatrix::from_fn(n, n, |_, _| draw());
        let a1 = &g * g.transpose() + DMatrix::identity(n, n) * 0.5;
        let m = DMatrix::from_fn(l, n, |_, _| draw());
        let c = DVector::from_fn(l, |_, _| draw());
        (x, a1, m, c)
    }

    #[test]
    fn weights_for_single_dimension() {
        let ut = UtSettings::default();
        let (a, b) = ut.weights(1);
        assert!((ut.lambda(1) + 0.99).abs() < 1e-15);
        assert!((a[0] + 99.0).abs() < 1e-9);
        assert!((a[1] - 50.0).abs() < 1e-9 && (a[2] - 50.0).abs() < 1e-9);
        assert!((b[0] - (-99.0 + 2.99)).abs() < 1e-9);
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn sigma_points_for_single_dimension() {
        let mut seen = Vec::new();
        let a1 = DMatrix::from_element(1, 1, 4.0);
        let a2 = DMatrix::zeros(1, 1);
        unscented_transform(
            &DVector::from_element(1, 1.0),
            &a1,
            &a2,
            |x| {
                seen.push(x[0]);
                Ok(x.clone())
            },
            &UtSettings::default(),
        )
        .unwrap();
        assert_eq!(seen.len(), 3);
        assert!((seen[0] - 1.0).abs() < 1e-15);
        assert!((seen[1] - 1.2).abs() < 1e-12 && (seen[2] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn center_weight_for_augmented_filter_state() {
        let (a, b) = UtSettings::default().weights(27);
        assert!((a[0] + 99.0).abs() < 1e-9);
        assert!((b[0] + 96.01).abs() < 1e-9);
    }

    #[test]
    fn constant_map_gives_additive_covariance() {
        let (x, a1, _, _) = affine_case(3, 2, 1);
        let a2 = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let out = unscented_transform(
            &x,
            &a1,
            &a2,
            |_| Ok(DVector::from_vec(vec![3.0, -1.0])),
            &UtSettings::default(),
        )
        .unwrap();
        assert!((&out.cov - &a2).amax() < 1e-12);
        assert!(out.cross.amax() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn affine_maps_are_exact(seed in 0u64..10_000, n in prop::sample::select(vec![1usize, 3, 10]), l in 1usize..5) {
            let (x, a1, m, c) = affine_case(n, l, seed);
            let a2 = DMatrix::identity(l, l) * 0.1;
            let out = unscented_transform(&x, &a1, &a2, |v| Ok(&m * v + &c), &UtSettings::default()).unwrap();
            let mean = &m * &x + &c;
            let cross = &a1 * m.transpose();
            let cov = &m * &a1 * m.transpose() + &a2;
            let rel = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a - b).amax() / b.amax().max(1.0);
            prop_assert!((&out.mean - &mean).amax() / mean.amax().max(1.0) < 1e-12);
            prop_assert!(rel(&out.cross, &cross) < 1e-12);
            prop_assert!(rel(&out.cov, &cov) < 1e-10);
        }
    }

    fn setup(m: usize) -> (Model, Grid, DualityModel) {
        let model = Model::new(&ScenarioConfig::demo(m).unwrap());
        let grid = Grid::new(8).unwrap();
        let d = DualityModel::new(&model, &grid, 1e-6, 0.5, 1.0).unwrap();
        (model, grid, d)
    }

    #[test]
    fn duality_model_shapes_and_references() {
        let (model, _, d) = setup(2);
        let (x0, xf) = model.config().boundary_augmented_states();
        assert_eq!(
            d.reference_positions[0].as_slice(),
            &[x0[0], x0[1], x0[2], x0[9], x0[10], x0[11]]
        );
        assert_eq!(
            d.reference_positions[7].as_slice(),
            &[xf[0], xf[1], xf[2], xf[9], xf[10], xf[11]]
        );
        assert_eq!(d.chi_dim(), 18 + 2 + 7);
        assert_eq!(d.output_dim(), 12 + 15);
        // last entry of R: (0.1/28) / ((0.1/700) * 28)
        let expected = (0.1 / 28.0) / ((0.1 / 700.0) * 28.0);
        assert!((d.r[(6, 6)] - expected).abs() < 1e-12);
        assert!(d
            .process_cov
            .view((0, 0), (20, 20))
            .iter()
            .all(|&v| v == 0.0));
        let t = d.target(3);
        assert!(t.rows(12, 15).iter().all(|&v| v == -1.0));
        assert_eq!(
            d.output_matrix(7).view((0, 0), (6, 20)),
            model_positions(&model)
        );
        assert!((d.output_matrix(0)[(0, 0)] - 0.5f64.powf(3.5)).abs() < 1e-15);
    }

    fn model_positions(model: &Model) -> DMatrix<f64> {
        SelectorMatrices::new(model.dims()).positions
    }

    /// Direct re-implementation of the selection score with explicit loops.
    fn score_oracle(model: &Model, grid: &Grid, d: &DualityModel, hist: &[DVector<f64>]) -> f64 {
        let cfg = model.config();
        let w = model.weights();
        let n = grid.nodes();
        let m = cfg.num_agents;
        let ns = 9 * m + 2;
        let nu = 3 * m + 1;
        let lo = cfg.input_lower();
        let hi = cfg.input_upper();
        let mut total = 0.0;
        for k in 0..n {
            let c = &hist[k];
            let scale = 0.5f64.powf((n - 1 - k) as f64 / 2.0);
            for i in 0..m {
                for a in 0..3 {
                    let r = c[9 * i + a];
                    total += (scale * d.reference_positions[k][3 * i + a] - scale * r).powi(2);
                    total += c[9 * i + 6 + a].powi(2);
                }
            }
            let mut g = vec![c[9 * m] - 1e-6];
            for j in 0..nu {
                g.push(c[ns + j] - hi[j]);
            }
            for j in 0..nu {
                g.push(lo[j] - c[ns + j]);
            }
            total += g.iter().map(|v| (v.max(0.0) + 1.0).powi(2)).sum::<f64>();
            for j in 0..nu {
                let target = if j == nu - 1 { cfg.time_min } else { 0.0 };
                let weight = if j == nu - 1 {
                    w.alpha1 / (w.alpha3 * cfg.time_max)
                } else {
                    w.alpha2 / w.alpha3
                };
                total += weight * (c[ns + j] - target).powi(2);
            }
        }
        for k in 0..n - 1 {
            let xi = DVector::from_column_slice(&hist[k].as_slice()[..ns]);
            let eta = DVector::from_column_slice(&hist[k].as_slice()[ns..]);
            let next =
                transcription::shoot(model, grid, k, &xi, &eta, &IntegratorSettings::default())
                    .unwrap();
            total += (0..ns)
                .map(|i| (next[i] - hist[k + 1][i]).abs())
                .sum::<f64>();
        }
        total
    }

    #[test]
    fn score_matches_independent_oracle() {
        let (model, grid, d) = setup(2);
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x0, _) = model.config().boundary_augmented_states();
            let hist: Vec<DVector<f64>> = (0..8)
                .map(|_| {
                    let mut c = DVector::zeros(27);
                    for i in 0..20 {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        c[i] = x0[i] + e;
                    }
                    for i in 20..27 {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        c[i] = d.eta_hat[i - 20] + 2.0 * e;
                    }
                    c
                })
                .collect();
            let a = d
                .particle_score(&model, &grid, &hist, &IntegratorSettings::default())
                .unwrap();
            let b = score_oracle(&model, &grid, &d, &hist);
            assert!((a - b).abs() <= 1e-9 * b.abs(), "{a} vs {b}");
        }
    }

    fn small_settings(np: usize, seed: u64) -> FilterSettings {
        FilterSettings {
            particles: np,
            seed,
            ..FilterSettings::default()
        }
    }

    #[test]
    fn uniform_weights_do_not_trigger_resampling() {
        let (model, _, d) = setup(1);
        let mut ens = ParticleEnsemble::new(&model, &d, &small_settings(30, 0));
        assert!((9.0 * ens.weights().iter().map(|w| w * w).sum::<f64>() - 0.3).abs() < 1e-12);
        assert!(!maybe_resample(&mut ens, 9.0).unwrap());
    }

    #[test]
    fn degenerate_weights_copy_the_heavy_particle() {
        let (model, _, d) = setup(1);
        let mut ens = ParticleEnsemble::new(&model, &d, &small_settings(5, 0));
        for (l, p) in ens.particles.iter_mut().enumerate() {
            p.history[0][0] = l as f64;
            p.weight = if l == 3 { 1.0 } else { 0.0 };
        }
        assert!(maybe_resample(&mut ens, 9.0).unwrap());
        for p in &ens.particles {
            assert_eq!(p.history[0][0], 3.0);
            assert!((p.weight - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_spread_keeps_identical_particles_identical() {
        let (model, grid, d) = setup(1);
        let settings = FilterSettings {
            alpha: 0.0,
            ..small_settings(4, 3)
        };
        let mut ens = ParticleEnsemble::new(&model, &d, &settings);
        let diag = filter_step(&mut ens, 0, &model, &grid, &d, &settings).unwrap();
        let first = ens.particles[0].history[1].clone();
        assert!(ens.particles.iter().all(|p| p.history[1] == first));
        assert!(diag.weight_sum_error < 1e-12);
        assert!((diag.effective_sample_size - 4.0).abs() < 1e-9);
    }

    #[test]
    fn single_particle_run_never_resamples_and_selects_itself() {
        let (model, grid, d) = setup(2);
        let settings = small_settings(1, 11);
        let (ens, diag) = run_filter(&model, &grid, &d, &settings).unwrap();
        assert_eq!(diag.resample_events(), 0);
        assert_eq!(ens.particles[0].weight, 1.0);
        let sel = select_particle(&ens, &model, &grid, &d, &settings.integrator).unwrap();
        assert_eq!(sel.index, 0);
        sel.trajectory.check(&model, &grid).unwrap();
    }

    #[test]
    fn duplicate_best_particle_keeps_lowest_index() {
        let (model, grid, d) = setup(1);
        let settings = small_settings(4, 5);
        let (mut ens, _) = run_filter(&model, &grid, &d, &settings).unwrap();
        let sel = select_particle(&ens, &model, &grid, &d, &settings.integrator).unwrap();
        let best = ens.particles[sel.index].clone();
        ens.particles.push(best);
        let again = select_particle(&ens, &model, &grid, &d, &settings.integrator).unwrap();
        assert_eq!(again.index, sel.index);
        assert!(again.scores.iter().all(|s| *s >= again.scores[again.index]));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (model, grid, d) = setup(1);
        let settings = small_settings(6, 42);
        let (a, da) = run_filter(&model, &grid, &d, &settings).unwrap();
        let (b, db) = run_filter(&model, &grid, &d, &settings).unwrap();
        assert_eq!(da, db);
        for (p, q) in a.particles.iter().zip(&b.particles) {
            assert_eq!(p.history, q.history);
            assert_eq!(p.covariance, q.covariance);
            assert_eq!(p.weight.to_bits(), q.weight.to_bits());
        }
        let other = run_filter(&model, &grid, &d, &small_settings(6, 43))
            .unwrap()
            .0;
        assert_ne!(a.particles[0].history, other.particles[0].history);
    }
}
