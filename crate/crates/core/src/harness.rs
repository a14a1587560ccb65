//! Single trials, Monte Carlo comparisons and artifact writers.
//!
//! Everything that depends on wall-clock time is written to separate files so
//! that the remaining outputs are a pure function of scenario, seeds and
//! settings.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::Model;
use crate::error::{Error, Result};
use crate::scenario::ScenarioConfig;
use crate::scp::{self, IterationRecord, ScpOutcome, ScpSettings, Termination};
use crate::transcription::{self, ClearanceAudit, DiscreteTrajectory, HistoryEntry, SolveReport};
use crate::warmstart::{self, FilterDiagnostics, FilterSettings};

/// Stream reserved for random initial guesses; particle streams count up
/// from zero and resampling uses the last one.
const RANDOM_INIT_STREAM: u64 = u64::MAX - 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Warmstart,
    Random,
}

impl InitMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InitMode::Warmstart => "warmstart",
            InitMode::Random => "random",
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmstart" => Ok(InitMode::Warmstart),
            "random" => Ok(InitMode::Random),
            other => Err(Error::Validation(format!(
                "unknown init mode {other:?} (expected warmstart or random)"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct RunSettings {
    pub scp: ScpSettings,
    pub filter: FilterSettings,
}

impl RunSettings {
    pub fn validate(&self) -> Result<()> {
        self.scp.validate()?;
        self.filter.validate()
    }
}

/// Initial guess for one trial. The filter seed is overridden by `seed`.
pub fn initial_guess(
    model: &Model,
    settings: &RunSettings,
    mode: InitMode,
    seed: u64,
) -> Result<(DiscreteTrajectory, Option<FilterDiagnostics>)> {
    let grid = settings.scp.grid()?;
    match mode {
        InitMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(RANDOM_INIT_STREAM);
            let traj =
                scp::random_initialization(model, &grid, &settings.scp.integrator, &mut rng)?;
            Ok((traj, None))
        }
        InitMode::Warmstart => {
            let filter = FilterSettings {
                seed,
                ..settings.filter.clone()
            };
            let ws = warmstart::generate_warm_start(model, &grid, settings.scp.gamma, &filter)?;
            Ok((ws.selection.trajectory, Some(ws.diagnostics)))
        }
    }
}

#[derive(Clone, Debug)]
pub struct Trial {
    pub mode: InitMode,
    pub seed: u64,
    pub initial: DiscreteTrajectory,
    pub filter: Option<FilterDiagnostics>,
    pub outcome: ScpOutcome,
    /// Seconds spent producing the initial guess (included in history times).
    pub init_time_s: f64,
}

/// Produces the initial guess and runs the SCP loop; the clock starts
/// before initialization so warm-start time counts against the budget.
pub fn run_trial(
    model: &Model,
    settings: &RunSettings,
    mode: InitMode,
    seed: u64,
) -> Result<Trial> {
    settings.validate()?;
    let start = Instant::now();
    let (initial, filter) = initial_guess(model, settings, mode, seed)?;
    let init_time_s = start.elapsed().as_secs_f64();
    let outcome = scp::prox_linear_solve_with_clock(model, &initial, &settings.scp, start)?;
    Ok(Trial {
        mode,
        seed,
        initial,
        filter,
        outcome,
        init_time_s,
    })
}

/// Time-independent summary of one solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub init: InitMode,
    pub seed: u64,
    pub objective: f64,
    pub violation: f64,
    pub final_time_s: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub final_slack_mass: f64,
    pub max_kkt_residual: f64,
}

impl RunReport {
    pub fn from_trial(trial: &Trial) -> Self {
        let rep = &trial.outcome.report;
        let its = &trial.outcome.iterations;
        Self {
            init: trial.mode,
            seed: trial.seed,
            objective: rep.objective,
            violation: rep.violation,
            final_time_s: rep.final_time_s,
            iterations: its.len(),
            termination: trial.outcome.termination,
            final_slack_mass: its.last().map_or(0.0, |r| r.slack_mass),
            max_kkt_residual: its.iter().map(|r| r.kkt_residual).fold(0.0, f64::max),
        }
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

/// `iteration,objective,violation`
pub fn convergence_csv(history: &[HistoryEntry]) -> String {
    let mut s = String::from("iteration,objective,violation\n");
    for h in history {
        s.push_str(&format!(
            "{},{},{}\n",
            h.iteration, h.objective, h.violation
        ));
    }
    s
}

/// `iteration,time_s`
pub fn timing_csv(history: &[HistoryEntry]) -> String {
    let mut s = String::from("iteration,time_s\n");
    for h in history {
        s.push_str(&format!("{},{}\n", h.iteration, h.time_s));
    }
    s
}

/// `iteration,displacement,slack_mass,model_value,qp_iterations,kkt_residual`
pub fn iterations_csv(records: &[IterationRecord]) -> String {
    let mut s =
        String::from("iteration,displacement,slack_mass,model_value,qp_iterations,kkt_residual\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration,
            r.displacement,
            r.slack_mass,
            r.model_value,
            r.qp_iterations,
            r.kkt_residual
        ));
    }
    s
}

/// Dense re-integration of a trajectory, with clearance audit.
#[derive(Clone, Debug)]
pub struct Postprocessed {
    pub rollout: transcription::Rollout,
    pub report: SolveReport,
    pub audit: ClearanceAudit,
}

pub fn postprocess(
    model: &Model,
    settings: &RunSettings,
    trajectory: &DiscreteTrajectory,
    samples_per_interval: usize,
) -> Result<Postprocessed> {
    let grid = settings.scp.grid()?;
    trajectory.check(model, &grid)?;
    let (rollout, report) = transcription::rollout_and_report(
        model,
        &grid,
        &trajectory.inputs,
        &settings.scp.integrator,
        samples_per_interval,
    )?;
    let audit = rollout.audit(model);
    Ok(Postprocessed {
        rollout,
        report,
        audit,
    })
}

/// Writes the dense trajectory, clearances, report and audit into `out`.
pub fn write_postprocessed(model: &Model, post: &Postprocessed, out: &Path) -> Result<()> {
    let agents = model.config().num_agents;
    write(
        &out.join("trajectory.csv"),
        post.rollout.trajectory_csv(agents),
    )?;
    write(
        &out.join("clearance.csv"),
        post.rollout.clearance_csv(model),
    )?;
    let rep = SolveReport {
        history: Vec::new(),
        ..post.report.clone()
    };
    write(&out.join("postprocess.json"), to_json(&rep))?;
    write(&out.join("audit.json"), to_json(&post.audit))
}

/// Artifacts of a single solve:
///
/// - `report.json`, `convergence.csv`, `iterations.csv`, `solution.json`,
///   `initial.json`, `trajectory.csv`, `clearance.csv`, `audit.json`
///   depend only on the inputs;
/// - `timing.csv` holds the wall-clock history.
pub fn write_trial(model: &Model, settings: &RunSettings, trial: &Trial, out: &Path) -> Result<()> {
    write(
        &out.join("report.json"),
        to_json(&RunReport::from_trial(trial)),
    )?;
    write(
        &out.join("convergence.csv"),
        convergence_csv(&trial.outcome.report.history),
    )?;
    write(
        &out.join("timing.csv"),
        timing_csv(&trial.outcome.report.history),
    )?;
    write(
        &out.join("iterations.csv"),
        iterations_csv(&trial.outcome.iterations),
    )?;
    write(&out.join("initial.json"), trial.initial.to_json())?;
    write(
        &out.join("solution.json"),
        trial.outcome.trajectory.to_json(),
    )?;
    if let Some(f) = &trial.filter {
        write(&out.join("filter.json"), to_json(f))?;
    }
    let post = postprocess(model, settings, &trial.outcome.trajectory, 100)?;
    write_postprocessed(model, &post, out)
}

/// Error report for failed commands.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub error: String,
    pub kind: String,
}

impl From<&Error> for ErrorReport {
    fn from(e: &Error) -> Self {
        Self {
            error: e.to_string(),
            kind: e.kind().to_string(),
        }
    }
}

impl ErrorReport {
    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

/// Sample quantile by linear interpolation between order statistics
/// (`h = (n - 1) p`). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Lower quartile, median, upper quartile. NaNs sort last.
pub fn quartiles(values: &[f64]) -> [f64; 3] {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    [
        quantile_sorted(&v, 0.25),
        quantile_sorted(&v, 0.5),
        quantile_sorted(&v, 0.75),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileRow {
    /// Iteration index or time, depending on the curve.
    pub abscissa: f64,
    pub objective: [f64; 3],
    pub violation: [f64; 3],
}

/// Quartiles across trials per iteration index. Trials that stopped early
/// contribute their last value to later indices.
pub fn quantiles_by_iteration(histories: &[&[HistoryEntry]]) -> Vec<QuantileRow> {
    let len = histories.iter().map(|h| h.len()).max().unwrap_or(0);
    (0..len)
        .map(|i| {
            let at: Vec<&HistoryEntry> = histories.iter().map(|h| &h[i.min(h.len() - 1)]).collect();
            let obj: Vec<f64> = at.iter().map(|e| e.objective).collect();
            let vio: Vec<f64> = at.iter().map(|e| e.violation).collect();
            QuantileRow {
                abscissa: i as f64,
                objective: quartiles(&obj),
                violation: quartiles(&vio),
            }
        })
        .collect()
}

/// Quartiles across trials on a uniform time grid; each trial contributes
/// its latest history entry at or before the grid time. Grid points before
/// a trial's first entry are skipped for all trials.
pub fn quantiles_by_time(histories: &[&[HistoryEntry]], points: usize) -> Vec<QuantileRow> {
    let t_end = histories
        .iter()
        .filter_map(|h| h.last().map(|e| e.time_s))
        .fold(0.0, f64::max);
    let t_start = histories
        .iter()
        .filter_map(|h| h.first().map(|e| e.time_s))
        .fold(0.0, f64::max);
    let points = points.max(2);
    (0..points)
        .map(|i| t_start + (t_end - t_start) * i as f64 / (points - 1) as f64)
        .map(|t| {
            let at: Vec<&HistoryEntry> = histories
                .iter()
                .map(|h| &h[h.partition_point(|e| e.time_s <= t).saturating_sub(1)])
                .collect();
            let obj: Vec<f64> = at.iter().map(|e| e.objective).collect();
            let vio: Vec<f64> = at.iter().map(|e| e.violation).collect();
            QuantileRow {
                abscissa: t,
                objective: quartiles(&obj),
                violation: quartiles(&vio),
            }
        })
        .collect()
}

pub fn quantile_csv(rows: &[QuantileRow], abscissa: &str) -> String {
    let mut s = format!(
        "{abscissa},objective_lower,objective_median,objective_upper,violation_lower,violation_median,violation_upper\n"
    );
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.abscissa,
            r.objective[0],
            r.objective[1],
            r.objective[2],
            r.violation[0],
            r.violation[1],
            r.violation[2]
        ));
    }
    s
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub scenario: PathBuf,
    pub seeds: Vec<u64>,
    /// Per-trial wall-clock budget, seconds.
    pub budget_s: f64,
    pub modes: Vec<InitMode>,
    pub out: PathBuf,
    /// Run trials concurrently.
    pub parallel: bool,
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Validation(
                "benchmark needs at least one trial".into(),
            ));
        }
        if !(self.budget_s > 0.0) {
            return Err(Error::Validation("budget must be > 0".into()));
        }
        if self.modes.is_empty() {
            return Err(Error::Validation(
                "benchmark needs at least one init mode".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub seed: u64,
    pub error: ErrorReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub init: InitMode,
    pub trials: usize,
    pub failures: Vec<TrialFailure>,
    pub reports: Vec<RunReport>,
    /// Quartiles of the final objective and violation over successful trials.
    pub final_objective: Option<[f64; 3]>,
    pub final_violation: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSummary {
    pub seeds: Vec<u64>,
    pub modes: Vec<ModeSummary>,
}

impl BenchmarkSummary {
    pub fn mode(&self, mode: InitMode) -> Option<&ModeSummary> {
        self.modes.iter().find(|m| m.init == mode)
    }
}

/// Per-trial histories, failures and summaries of one benchmark.
#[derive(Clone, Debug)]
pub struct BenchmarkResult {
    pub summary: BenchmarkSummary,
    /// Successful trials' histories, per mode in `spec.modes` order.
    pub histories: Vec<Vec<(u64, Vec<HistoryEntry>)>>,
}

/// Runs every (mode, seed) pair with the budget applied and writes:
///
/// - `summary.json`, `quantiles_<mode>.csv` (per iteration index) and
///   `<mode>/seed_<seed>.csv`, all deterministic given finite iteration caps;
/// - `timing/quantiles_<mode>.csv` (uniform time grid) and
///   `timing/<mode>_seed_<seed>.csv`, which depend on wall-clock time.
///
/// A failed trial is recorded and the run continues.
pub fn run_benchmark(spec: &BenchmarkSpec, settings: &RunSettings) -> Result<BenchmarkResult> {
    spec.validate()?;
    let cfg = ScenarioConfig::load(&spec.scenario)?;
    let model = Model::new(&cfg);
    let settings = RunSettings {
        scp: ScpSettings {
            budget_s: Some(spec.budget_s),
            ..settings.scp.clone()
        },
        ..settings.clone()
    };
    settings.validate()?;
    let jobs: Vec<(InitMode, u64)> = spec
        .modes
        .iter()
        .flat_map(|&m| spec.seeds.iter().map(move |&s| (m, s)))
        .collect();
    let run = |&(m, s): &(InitMode, u64)| run_trial(&model, &settings, m, s);
    let results: Vec<Result<Trial>> = if spec.parallel {
        jobs.par_iter().map(run).collect()
    } else {
        jobs.iter().map(run).collect()
    };

    let mut modes = Vec::new();
    let mut histories = Vec::new();
    for &mode in &spec.modes {
        let mut failures = Vec::new();
        let mut reports = Vec::new();
        let mut hist = Vec::new();
        for ((m, seed), res) in jobs.iter().zip(&results) {
            if *m != mode {
                continue;
            }
            match res {
                Ok(t) => {
                    reports.push(RunReport::from_trial(t));
                    hist.push((*seed, t.outcome.report.history.clone()));
                }
                Err(e) => failures.push(TrialFailure {
                    seed: *seed,
                    error: e.into(),
                }),
            }
        }
        let fin = |f: fn(&RunReport) -> f64| {
            (!reports.is_empty()).then(|| quartiles(&reports.iter().map(f).collect::<Vec<_>>()))
        };
        modes.push(ModeSummary {
            init: mode,
            trials: spec.seeds.len(),
            final_objective: fin(|r| r.objective),
            final_violation: fin(|r| r.violation),
            failures,
            reports,
        });
        histories.push(hist);
    }
    let summary = BenchmarkSummary {
        seeds: spec.seeds.clone(),
        modes,
    };
    let result = BenchmarkResult { summary, histories };
    write_benchmark(&result, &spec.out)?;
    Ok(result)
}

pub fn write_benchmark(result: &BenchmarkResult, out: &Path) -> Result<()> {
    write(&out.join("summary.json"), to_json(&result.summary))?;
    for (ms, hist) in result.summary.modes.iter().zip(&result.histories) {
        let name = ms.init.as_str();
        for (seed, h) in hist {
            write(
                &out.join(name).join(format!("seed_{seed}.csv")),
                convergence_csv(h),
            )?;
            write(
                &out.join("timing").join(format!("{name}_seed_{seed}.csv")),
                timing_csv(h),
            )?;
        }
        let refs: Vec<&[HistoryEntry]> = hist.iter().map(|(_, h)| h.as_slice()).collect();
        if refs.is_empty() {
            continue;
        }
        write(
            &out.join(format!("quantiles_{name}.csv")),
            quantile_csv(&quantiles_by_iteration(&refs), "iteration"),
        )?;
        write(
            &out.join("timing").join(format!("quantiles_{name}.csv")),
            quantile_csv(&quantiles_by_time(&refs, 200), "time_s"),
        )?;
    }
    Ok(())
}
