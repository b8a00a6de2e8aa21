//! parse -> build -> improve -> simulate -> export.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use ellabs_core::abstraction::{build_abstraction, AbstractionError, BuildStatus, ReachAvoidProblem};
use ellabs_core::conic::{BarrierSolver, ConicBackend, ConicProgram, ConicSolution};
use ellabs_core::geometry::volume;
use ellabs_core::runtime::{certify_trajectory, Certificate, ClosedLoop, ConcreteController};
use ellabs_core::synthesis::{solve_local_problem, SynthesisError};
use serde::Serialize;

use crate::export::{to_dot, write_json, write_trajectory, write_value_grid, AbstractionRecord};
use crate::problem::{Problem, ProblemError, ProblemFile};

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Covered = 0,
    InputError = 1,
    IterationCapReached = 2,
    BackendFailure = 3,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug)]
pub enum RunError {
    Input(anyhow::Error),
    Backend(anyhow::Error),
}

impl RunError {
    pub fn status(&self) -> ExitStatus {
        match self {
            RunError::Input(_) => ExitStatus::InputError,
            RunError::Backend(_) => ExitStatus::BackendFailure,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Input(e) => write!(f, "input error: {e:#}"),
            RunError::Backend(e) => write!(f, "backend failure: {e:#}"),
        }
    }
}

impl From<ProblemError> for RunError {
    fn from(e: ProblemError) -> Self {
        RunError::Input(e.into())
    }
}

fn io(e: impl Into<anyhow::Error>) -> RunError {
    RunError::Backend(e.into())
}

/// Lambda list of a sweep run.
#[derive(Debug, Clone, PartialEq)]
pub enum Sweep {
    /// `single_transition.sweep` from the problem file.
    FromFile,
    Lambdas(Vec<f64>),
}

/// What to run; overrides are applied to the file before hashing.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub seed: Option<u64>,
    pub max_iters: Option<usize>,
    pub improve_budget: Option<usize>,
    pub lambda: Option<f64>,
    pub trajectories: Option<usize>,
    pub grid_res: Option<usize>,
    pub single_transition: bool,
    pub sweep: Option<Sweep>,
    pub dump_sdp: bool,
}

impl RunOptions {
    pub fn apply(&self, file: &mut ProblemFile) {
        if let Some(s) = self.seed {
            file.build.seed = s;
        }
        if let Some(m) = self.max_iters {
            file.build.max_iters = m;
        }
        if let Some(b) = self.improve_budget {
            file.build.improve_budget = b;
        }
        if let Some(l) = self.lambda {
            file.build.lambda = l;
            if let Some(st) = file.single_transition.as_mut() {
                st.lambda = l;
            }
        }
        if let Some(t) = self.trajectories {
            file.simulation.trajectories = t;
        }
        if let Some(r) = self.grid_res {
            file.simulation.grid_res = r;
        }
    }
}

/// Writes every program it forwards as `sdp_NNNNN.txt`.
pub struct DumpingBackend<B> {
    inner: B,
    dir: PathBuf,
    count: usize,
    failed: Option<std::io::Error>,
}

impl<B> DumpingBackend<B> {
    pub fn new(inner: B, dir: PathBuf) -> Self {
        Self {
            inner,
            dir,
            count: 0,
            failed: None,
        }
    }
}

impl<B: ConicBackend> ConicBackend for DumpingBackend<B> {
    fn solve(&mut self, program: &ConicProgram) -> ConicSolution {
        let sol = self.inner.solve(program);
        if self.failed.is_none() {
            let mut text = String::new();
            let _ = program.write_text(&mut text);
            text.push_str(&format!(
                "status {:?} objective {:e} residual {:e}\n",
                sol.status, sol.objective, sol.residual
            ));
            let path = self.dir.join(format!("sdp_{:05}.txt", self.count));
            if let Err(e) = std::fs::write(path, text) {
                self.failed = Some(e);
            }
        }
        self.count += 1;
        sol
    }
}

fn backend(problem: &Problem, opts: &RunOptions) -> Result<Box<dyn ConicBackend>, RunError> {
    let solver = BarrierSolver::new(problem.solver);
    if opts.dump_sdp {
        let dir = opts.out_dir.join("sdp");
        std::fs::create_dir_all(&dir).map_err(io)?;
        Ok(Box::new(DumpingBackend::new(solver, dir)))
    } else {
        Ok(Box::new(solver))
    }
}

#[derive(Debug, Serialize)]
struct WallTimes {
    build_s: f64,
    simulate_s: f64,
    export_s: f64,
}

#[derive(Debug, Serialize)]
struct TrajectorySummary {
    file: String,
    noise_seed: Option<u64>,
    steps: Option<usize>,
    realized_cost: Option<f64>,
    certificate: String,
}

#[derive(Debug, Serialize)]
struct AbstractionSummary {
    iteration: usize,
    cells: usize,
    transitions: usize,
    v_x0: Option<f64>,
}

#[derive(Debug, Serialize)]
struct Manifest {
    seed: u64,
    config_hash: String,
    status: &'static str,
    exit_code: i32,
    iterations: usize,
    infeasible: usize,
    blocked: usize,
    rewires_tried: usize,
    rewires_accepted: usize,
    x0: Option<Vec<f64>>,
    first_cover: Option<AbstractionSummary>,
    final_abstraction: AbstractionSummary,
    trajectories: Vec<TrajectorySummary>,
    wall_times: WallTimes,
}

/// Loads `path`, applies the overrides and runs the requested mode.
pub fn run(path: &Path, opts: &RunOptions) -> Result<ExitStatus, RunError> {
    let mut file = ProblemFile::load(path)?;
    opts.apply(&mut file);
    run_file(file, opts)
}

pub fn run_file(file: ProblemFile, opts: &RunOptions) -> Result<ExitStatus, RunError> {
    let problem = file.validate()?;
    std::fs::create_dir_all(&opts.out_dir)
        .with_context(|| format!("creating {}", opts.out_dir.display()))
        .map_err(RunError::Input)?;
    if let Some(list) = &opts.sweep {
        return sweep(&problem, list, opts);
    }
    if opts.single_transition {
        return single_transition(&problem, opts);
    }
    full_run(&problem, opts)
}

fn require_single(problem: &Problem) -> Result<&crate::problem::SingleTransition, RunError> {
    problem
        .single
        .as_ref()
        .ok_or_else(|| RunError::Input(anyhow::anyhow!("field `single_transition`: section required for this mode")))
}

/// One local problem; prints `J` and the cell volume.
fn single_transition(problem: &Problem, opts: &RunOptions) -> Result<ExitStatus, RunError> {
    let st = require_single(problem)?;
    let mut be = backend(problem, opts)?;
    let lp = problem
        .context
        .local_problem(&st.center, &st.target, st.lambda)
        .map_err(|e| RunError::Input(e.into()))?;
    match solve_local_problem(&lp, be.as_mut(), &problem.params.synthesis) {
        Ok(sol) => {
            let vol = volume(&sol.cell);
            println!("J = {:.4}  vol = {:.4}", sol.j_bound, vol);
            #[derive(Serialize)]
            struct Out {
                lambda: f64,
                j_bound: f64,
                volume: f64,
                objective: f64,
                center: Vec<f64>,
                shape: Vec<Vec<f64>>,
                gain: Vec<Vec<f64>>,
                offset: Vec<f64>,
            }
            let m = |a: &nalgebra::DMatrix<f64>| (0..a.nrows()).map(|i| a.row(i).iter().copied().collect()).collect();
            write_json(
                &opts.out_dir.join("single_transition.json"),
                &Out {
                    lambda: st.lambda,
                    j_bound: sol.j_bound,
                    volume: vol,
                    objective: sol.objective,
                    center: sol.cell.center().iter().copied().collect(),
                    shape: m(sol.cell.shape()),
                    gain: m(&sol.controller.gain),
                    offset: sol.controller.offset.iter().copied().collect(),
                },
            )
            .map_err(io)?;
            Ok(ExitStatus::Covered)
        }
        Err(SynthesisError::Infeasible) | Err(SynthesisError::NumericalFailure) => {
            println!("infeasible");
            Ok(ExitStatus::IterationCapReached)
        }
        Err(e) => Err(RunError::Input(e.into())),
    }
}

/// One row per lambda: `lambda, J, vol, status`.
fn sweep(problem: &Problem, list: &Sweep, opts: &RunOptions) -> Result<ExitStatus, RunError> {
    let st = require_single(problem)?;
    let lambdas = match list {
        Sweep::FromFile => &st.sweep,
        Sweep::Lambdas(l) => l,
    };
    for (i, l) in lambdas.iter().enumerate() {
        if !(*l > 0.0 && *l < 1.0) {
            return Err(RunError::Input(anyhow::anyhow!(
                "--sweep[{i}]: lambda must lie strictly between 0 and 1"
            )));
        }
    }
    let mut be = backend(problem, opts)?;
    let path = opts.out_dir.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(["lambda", "j_bound", "volume", "status"]).map_err(io)?;
    for &l in lambdas {
        let lp = problem
            .context
            .local_problem(&st.center, &st.target, l)
            .map_err(|e| RunError::Input(e.into()))?;
        let row = match solve_local_problem(&lp, be.as_mut(), &problem.params.synthesis) {
            Ok(sol) => [
                l.to_string(),
                sol.j_bound.to_string(),
                volume(&sol.cell).to_string(),
                "optimal".to_string(),
            ],
            Err(SynthesisError::Infeasible) | Err(SynthesisError::NumericalFailure) => {
                [l.to_string(), String::new(), String::new(), "infeasible".to_string()]
            }
            Err(e) => return Err(RunError::Input(e.into())),
        };
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(io)?;
    println!("wrote {}", path.display());
    Ok(ExitStatus::Covered)
}

fn full_run(problem: &Problem, opts: &RunOptions) -> Result<ExitStatus, RunError> {
    let spec = problem
        .spec
        .clone()
        .ok_or_else(|| RunError::Input(anyhow::anyhow!("field `spec`: section required for a full run")))?;
    let mut be = backend(problem, opts)?;
    let rap = ReachAvoidProblem {
        context: problem.context.clone(),
        spec,
    };

    let t0 = Instant::now();
    let outcome = build_abstraction(&rap, &problem.params, be.as_mut()).map_err(|e| match e {
        AbstractionError::DegenerateTarget(_) | AbstractionError::TargetBlocked | AbstractionError::ZeroIterationCap => {
            RunError::Input(anyhow::anyhow!("field `spec`: {e}"))
        }
        e => RunError::Backend(e.into()),
    })?;
    let build_s = t0.elapsed().as_secs_f64();

    let controller = ConcreteController::new(outcome.abstraction.clone(), outcome.values.clone());
    let x0 = problem.x0.clone();
    let v_at = |c: &ConcreteController| x0.as_ref().and_then(|x| c.refine_value(x).ok());

    let t1 = Instant::now();
    let mut summaries = Vec::new();
    let mut trajectories = Vec::new();
    if let Some(x0) = &x0 {
        let lp = ClosedLoop {
            system: &problem.context.system,
            controller: &controller,
            cost: &problem.context.cost,
            disturbances: &problem.context.disturbances,
            target: &rap.spec.target,
        };
        for k in 0..problem.file.simulation.trajectories {
            let policy = problem.noise_policy(k);
            let file = format!("trajectory_{k:03}.csv");
            let seed = match policy {
                ellabs_core::runtime::NoisePolicy::Uniform { seed } => Some(seed),
                _ => None,
            };
            match lp.simulate(x0, policy, problem.file.simulation.max_steps) {
                Ok(t) => {
                    let cert = certify_trajectory(&t, &controller);
                    summaries.push(TrajectorySummary {
                        file: file.clone(),
                        noise_seed: seed,
                        steps: Some(t.steps()),
                        realized_cost: Some(t.total_cost()),
                        certificate: match cert {
                            Certificate::Pass => "pass".into(),
                            c => format!("{c:?}"),
                        },
                    });
                    trajectories.push((file, t));
                }
                Err(e) => {
                    log::warn!("trajectory {k}: {e}");
                    summaries.push(TrajectorySummary {
                        file: String::new(),
                        noise_seed: seed,
                        steps: None,
                        realized_cost: None,
                        certificate: e.to_string(),
                    });
                }
            }
        }
    }
    let simulate_s = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let dir = &opts.out_dir;
    write_json(&dir.join("abstraction.json"), &AbstractionRecord::new(&outcome.abstraction, &outcome.values))
        .map_err(io)?;
    std::fs::write(dir.join("abstraction.dot"), to_dot(&outcome.abstraction, &outcome.values)).map_err(io)?;
    if let Some(fc) = &outcome.first_cover {
        write_json(&dir.join("abstraction_first.json"), &AbstractionRecord::new(&fc.abstraction, &fc.values))
            .map_err(io)?;
    }
    let res = problem.file.simulation.grid_res;
    if res >= 2 {
        let f = std::fs::File::create(dir.join("value_grid.csv")).map_err(io)?;
        write_value_grid(std::io::BufWriter::new(f), &controller, &rap.spec.state_box, res).map_err(io)?;
    }
    for (name, t) in &trajectories {
        let f = std::fs::File::create(dir.join(name)).map_err(io)?;
        write_trajectory(std::io::BufWriter::new(f), t).map_err(io)?;
    }
    let export_s = t2.elapsed().as_secs_f64();

    let status = match outcome.status {
        BuildStatus::Covered => ExitStatus::Covered,
        BuildStatus::IterationCapReached => ExitStatus::IterationCapReached,
    };
    let manifest = Manifest {
        seed: problem.params.seed,
        config_hash: problem.file.config_hash(),
        status: match status {
            ExitStatus::Covered => "covered",
            _ => "iteration_cap_reached",
        },
        exit_code: status.code(),
        iterations: outcome.stats.iterations,
        infeasible: outcome.stats.infeasible,
        blocked: outcome.stats.blocked,
        rewires_tried: outcome.stats.rewires_tried,
        rewires_accepted: outcome.stats.rewires_accepted,
        x0: x0.as_ref().map(|x| x.iter().copied().collect()),
        first_cover: outcome.first_cover.as_ref().map(|fc| AbstractionSummary {
            iteration: fc.iteration,
            cells: fc.abstraction.len(),
            transitions: fc.abstraction.transitions().len(),
            v_x0: v_at(&ConcreteController::new(fc.abstraction.clone(), fc.values.clone())),
        }),
        final_abstraction: AbstractionSummary {
            iteration: outcome.stats.iterations,
            cells: outcome.abstraction.len(),
            transitions: outcome.abstraction.transitions().len(),
            v_x0: v_at(&controller),
        },
        trajectories: summaries,
        wall_times: WallTimes {
            build_s,
            simulate_s,
            export_s,
        },
    };
    write_json(&dir.join("manifest.json"), &manifest).map_err(io)?;
    println!(
        "{}: {} cells, {} transitions, v(x0) = {}",
        manifest.status,
        manifest.final_abstraction.cells,
        manifest.final_abstraction.transitions,
        manifest
            .final_abstraction
            .v_x0
            .map_or("n/a".to_string(), |v| format!("{v:.3}")),
    );
    Ok(status)
}
