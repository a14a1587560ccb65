//! `swarmtraj` command-line interface.
//!
//! Every flag can also be set through an environment variable named
//! `SWARMTRAJ_<FLAG>` (for example `SWARMTRAJ_BUDGET=60`).
//!
//! Exit codes: 0 on success, 1 on a solver or I/O failure (an error report is
//! printed to stderr and, when an output directory is known, written to
//! `error.json`), 2 on usage errors and missing scenario files.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use swarmtraj::harness::{self, BenchmarkSpec, ErrorReport, InitMode, RunReport, RunSettings};
use swarmtraj::qp::QpMethod;
use swarmtraj::warmstart::{self, FilterSettings};
use swarmtraj::{DiscreteTrajectory, Error, Model, ScenarioConfig};

#[derive(Parser, Debug)]
#[command(
    name = "swarmtraj",
    version,
    about = "Multiagent quadrotor trajectory optimization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one scenario and write trajectory, report and convergence files.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "SWARMTRAJ_INIT", default_value = "warmstart")]
        init: Init,
        #[arg(long, env = "SWARMTRAJ_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Run the particle filter and write the selected warm start.
    Warmstart {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "SWARMTRAJ_SEED", default_value_t = 0)]
        seed: u64,
    },
    /// Seeded Monte Carlo comparison of initialization modes.
    Benchmark {
        #[command(flatten)]
        common: Common,
        #[arg(long, env = "SWARMTRAJ_INIT", default_value = "both")]
        init: Init,
        /// First seed; trials use `seed, seed + 1, …`.
        #[arg(long, env = "SWARMTRAJ_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, env = "SWARMTRAJ_TRIALS", default_value_t = 10)]
        trials: usize,
        /// Run trials one after another instead of concurrently.
        #[arg(long, env = "SWARMTRAJ_SERIAL")]
        serial: bool,
    },
    /// Densely re-integrate a trajectory file and audit its constraints.
    Postprocess {
        #[command(flatten)]
        common: Common,
        /// Trajectory JSON as written by `solve` or `warmstart`.
        #[arg(long, env = "SWARMTRAJ_TRAJECTORY")]
        trajectory: PathBuf,
        #[arg(long, env = "SWARMTRAJ_SAMPLES", default_value_t = 100)]
        samples: usize,
    },
}

#[derive(Args, Debug)]
struct Common {
    #[arg(long, env = "SWARMTRAJ_SCENARIO")]
    scenario: PathBuf,
    #[arg(long, env = "SWARMTRAJ_OUT", default_value = "out")]
    out: PathBuf,
    /// Wall-clock budget per solve, seconds.
    #[arg(long, env = "SWARMTRAJ_BUDGET")]
    budget: Option<f64>,
    #[arg(long, env = "SWARMTRAJ_BETA", default_value_t = 20.0)]
    beta: f64,
    #[arg(long, env = "SWARMTRAJ_RHO", default_value_t = 0.1)]
    rho: f64,
    #[arg(long, env = "SWARMTRAJ_GAMMA", default_value_t = 1e-6)]
    gamma: f64,
    /// Number of grid nodes.
    #[arg(long = "N", env = "SWARMTRAJ_N", default_value_t = 8)]
    nodes: usize,
    /// Number of particles.
    #[arg(long, env = "SWARMTRAJ_NP", default_value_t = 30)]
    np: usize,
    #[arg(long, env = "SWARMTRAJ_MAX_ITERATIONS", default_value_t = 1000)]
    max_iterations: usize,
    /// Squared-displacement stopping tolerance.
    #[arg(long, env = "SWARMTRAJ_TOLERANCE", default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, env = "SWARMTRAJ_QP", default_value = "ipm")]
    qp: Qp,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Init {
    Warmstart,
    Random,
    Both,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Qp {
    Ipm,
    Admm,
    Auto,
}

impl Common {
    fn settings(&self) -> RunSettings {
        let mut s = RunSettings::default();
        s.scp.beta = self.beta;
        s.scp.rho = self.rho;
        s.scp.gamma = self.gamma;
        s.scp.nodes = self.nodes;
        s.scp.max_iterations = self.max_iterations;
        s.scp.tolerance = self.tolerance;
        s.scp.budget_s = self.budget;
        s.scp.qp.method = match self.qp {
            Qp::Ipm => QpMethod::InteriorPoint,
            Qp::Admm => QpMethod::Admm,
            Qp::Auto => QpMethod::Auto,
        };
        s.filter.particles = self.np;
        s
    }

    fn load(&self) -> Result<(Model, RunSettings), Error> {
        let cfg = ScenarioConfig::load(&self.scenario)?;
        let settings = self.settings();
        settings.validate()?;
        Ok((Model::new(&cfg), settings))
    }
}

fn modes(init: Init) -> Vec<InitMode> {
    match init {
        Init::Warmstart => vec![InitMode::Warmstart],
        Init::Random => vec![InitMode::Random],
        Init::Both => vec![InitMode::Warmstart, InitMode::Random],
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::create_dir_all(path.parent().unwrap_or(Path::new(".")))?;
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct WarmstartScores {
    selected: usize,
    scores: Vec<f64>,
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Solve { common, init, seed } => {
            let (model, settings) = common.load()?;
            let mode = match init {
                Init::Warmstart => InitMode::Warmstart,
                Init::Random => InitMode::Random,
                Init::Both => {
                    anyhow::bail!(Error::Validation("solve takes a single init mode".into()))
                }
            };
            let trial = harness::run_trial(&model, &settings, mode, *seed)?;
            harness::write_trial(&model, &settings, &trial, &common.out)?;
            let rep = RunReport::from_trial(&trial);
            println!(
                "{} seed {}: objective {:.6} violation {:.3e} final time {:.3} s, {} iterations ({:?})",
                rep.init, rep.seed, rep.objective, rep.violation, rep.final_time_s, rep.iterations, rep.termination
            );
        }
        Command::Warmstart { common, seed } => {
            let (model, settings) = common.load()?;
            let grid = settings.scp.grid()?;
            let filter = FilterSettings {
                seed: *seed,
                ..settings.filter.clone()
            };
            let ws = warmstart::generate_warm_start(&model, &grid, settings.scp.gamma, &filter)?;
            let traj = &ws.selection.trajectory;
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(common.out.join("warmstart.json"), traj.to_json())?;
            write_json(&common.out.join("filter.json"), &ws.diagnostics)?;
            write_json(
                &common.out.join("scores.json"),
                &WarmstartScores {
                    selected: ws.selection.index,
                    scores: ws.selection.scores.clone(),
                },
            )?;
            println!(
                "selected particle {} of {} (score {:.6}), {} resample events",
                ws.selection.index,
                ws.selection.scores.len(),
                ws.selection.scores[ws.selection.index],
                ws.diagnostics.resample_events()
            );
        }
        Command::Benchmark {
            common,
            init,
            seed,
            trials,
            serial,
        } => {
            let settings = common.settings();
            let spec = BenchmarkSpec {
                scenario: common.scenario.clone(),
                seeds: (0..*trials as u64).map(|i| seed + i).collect(),
                budget_s: common.budget.unwrap_or(120.0),
                modes: modes(*init),
                out: common.out.clone(),
                parallel: !serial,
            };
            let res = harness::run_benchmark(&spec, &settings)?;
            for m in &res.summary.modes {
                match (m.final_objective, m.final_violation) {
                    (Some(o), Some(v)) => println!(
                        "{}: {} trials, {} failed; final objective median {:.6} [{:.6}, {:.6}], violation median {:.3e}",
                        m.init,
                        m.trials,
                        m.failures.len(),
                        o[1],
                        o[0],
                        o[2],
                        v[1]
                    ),
                    _ => println!("{}: all {} trials failed", m.init, m.trials),
                }
            }
        }
        Command::Postprocess {
            common,
            trajectory,
            samples,
        } => {
            let (model, settings) = common.load()?;
            let traj = DiscreteTrajectory::load(trajectory)?;
            let post = harness::postprocess(&model, &settings, &traj, *samples)?;
            harness::write_postprocessed(&model, &post, &common.out)?;
            println!(
                "objective {:.6} violation {:.3e}; min pairwise distance {:.4}, max speed {:.4}",
                post.report.objective,
                post.report.violation,
                post.audit.min_pairwise_distance,
                post.audit.max_speed
            );
        }
    }
    Ok(())
}

fn out_dir(cli: &Cli) -> &Path {
    match &cli.command {
        Command::Solve { common, .. }
        | Command::Warmstart { common, .. }
        | Command::Benchmark { common, .. }
        | Command::Postprocess { common, .. } => &common.out,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (report, code) = match e.downcast_ref::<Error>() {
                Some(err @ Error::ScenarioNotFound(_)) => (ErrorReport::from(err), 2),
                Some(err) => (ErrorReport::from(err), 1),
                None => (
                    ErrorReport {
                        error: format!("{e:#}"),
                        kind: "io".into(),
                    },
                    1,
                ),
            };
            let json = report.to_json();
            eprint!("{json}");
            if code != 2 {
                let _ = std::fs::create_dir_all(out_dir(&cli));
                let _ = std::fs::write(out_dir(&cli).join("error.json"), &json);
            }
            ExitCode::from(code)
        }
    }
}
