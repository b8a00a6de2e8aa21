//! TOML problem files: schema, defaults and validation into core types.

use std::path::Path;

use ellabs_core::abstraction::{BuildParams, LambdaSchedule, ReachAvoidSpec};
use ellabs_core::conic::BarrierSettings;
use ellabs_core::dynamics::{Monomial, Polynomial, PolynomialSystem};
use ellabs_core::geometry::{Ellipsoid, Hyperrectangle, InputSet, VPolytope};
use ellabs_core::runtime::NoisePolicy;
use ellabs_core::synthesis::{factor_stage_cost, SynthesisConfig, TransitionContext};
use ellabs_core::Tolerances;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
    #[error("field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field_err(field: impl Into<String>, message: impl Into<String>) -> ProblemError {
    ProblemError::Field {
        field: field.into(),
        message: message.into(),
    }
}

/// One monomial `coeff * x^x_exp * u^u_exp * w^w_exp`; omitted exponent
/// lists are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TermSpec {
    pub coeff: f64,
    #[serde(default)]
    pub x_exp: Vec<u32>,
    #[serde(default)]
    pub u_exp: Vec<u32>,
    #[serde(default)]
    pub w_exp: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub center: Vec<f64>,
    pub half: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub n_x: usize,
    pub n_u: usize,
    pub n_w: usize,
    /// One list of terms per state component.
    pub dynamics: Vec<Vec<TermSpec>>,
    /// Box over `(x, u, w)` for the Lipschitz bound.
    #[serde(default)]
    pub domain: Option<BoxSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputsSection {
    /// Matrices `U_k` (rows of numbers); `U = { u : |U_k u| <= 1 }`.
    pub constraints: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub anchor: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default)]
    pub vertices: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub half_lengths: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSection {
    #[serde(default)]
    pub q: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecSection {
    pub state_box: BoxSpec,
    pub initial: BoxSpec,
    pub target: BoxSpec,
    #[serde(default)]
    pub obstacles: Vec<BoxSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildSection {
    pub seed: u64,
    pub max_iters: usize,
    pub improve_budget: usize,
    pub lambda: f64,
    /// When set, `lambda` applies until coverage and this value after.
    pub lambda_exploit: Option<f64>,
    pub k_rewire: usize,
    pub p_goal: f64,
    pub stall_limit: usize,
    pub rewire_before_cover: bool,
}

impl Default for BuildSection {
    fn default() -> Self {
        let d = BuildParams::default();
        Self {
            seed: d.seed,
            max_iters: d.max_iters,
            improve_budget: d.improve_budget,
            lambda: 0.01,
            lambda_exploit: None,
            k_rewire: d.k_rewire,
            p_goal: d.p_goal,
            stall_limit: d.stall_limit,
            rewire_before_cover: d.rewire_before_cover,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    Zero,
    Uniform,
    Vertex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    /// Start state; the centre of the initial box when omitted.
    pub x0: Option<Vec<f64>>,
    pub trajectories: usize,
    pub max_steps: usize,
    pub noise: NoiseMode,
    /// Seed of the first trajectory; trajectory `k` uses `noise_seed + k`.
    pub noise_seed: u64,
    /// Points per axis of the value grid.
    pub grid_res: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            x0: None,
            trajectories: 1,
            max_steps: 200,
            noise: NoiseMode::Uniform,
            noise_seed: 0,
            grid_res: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TolerancesSection {
    pub membership: f64,
    pub symmetry: f64,
    pub s_procedure: f64,
    pub shrink: f64,
    pub secular: f64,
    pub lmi_margin: f64,
    pub solver_gap: f64,
    pub variable_bound: f64,
    pub max_state_dim: usize,
}

impl Default for TolerancesSection {
    fn default() -> Self {
        let t = Tolerances::default();
        let s = SynthesisConfig::default();
        Self {
            membership: t.membership,
            symmetry: t.symmetry,
            s_procedure: t.s_procedure,
            shrink: t.shrink,
            secular: t.secular,
            lmi_margin: t.lmi_margin,
            solver_gap: t.solver_gap,
            variable_bound: s.variable_bound,
            max_state_dim: s.max_state_dim,
        }
    }
}

fn default_sweep() -> Vec<f64> {
    vec![0.01, 0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9]
}

fn default_lambda() -> f64 {
    0.01
}

/// One local problem from a fixed centre into a fixed target cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleTransitionSection {
    pub center: Vec<f64>,
    pub target_center: Vec<f64>,
    pub target_shape: Vec<Vec<f64>>,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_sweep")]
    pub sweep: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemFile {
    pub system: SystemSection,
    pub inputs: InputsSection,
    pub noise: NoiseSection,
    #[serde(default)]
    pub cost: CostSection,
    #[serde(default)]
    pub spec: Option<SpecSection>,
    #[serde(default)]
    pub build: BuildSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub tolerances: TolerancesSection,
    #[serde(default)]
    pub single_transition: Option<SingleTransitionSection>,
}

/// A validated file turned into solver-ready objects.
#[derive(Debug, Clone)]
pub struct Problem {
    pub file: ProblemFile,
    pub context: TransitionContext,
    pub spec: Option<ReachAvoidSpec>,
    pub params: BuildParams,
    pub solver: BarrierSettings,
    pub x0: Option<DVector<f64>>,
    pub noise: NoiseMode,
    pub single: Option<SingleTransition>,
}

#[derive(Debug, Clone)]
pub struct SingleTransition {
    pub center: DVector<f64>,
    pub target: Ellipsoid,
    pub lambda: f64,
    pub sweep: Vec<f64>,
}

impl ProblemFile {
    pub fn parse(text: &str) -> Result<Self, ProblemError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ProblemError> {
        let text = std::fs::read_to_string(path).map_err(|e| ProblemError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    /// SHA-256 of the canonical JSON form with defaults filled in, so
    /// formatting, comments and spelled-out defaults do not change it.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        let (nx, nu) = (c.system.n_x, c.system.n_u);
        if c.cost.q.is_none() {
            c.cost.q = Some((0..nx + nu + 1).map(|i| (0..nx + nu + 1).map(|j| f64::from(u8::from(i == j))).collect()).collect());
        }
        if let (None, Some(s)) = (&c.simulation.x0, &c.spec) {
            c.simulation.x0 = Some(s.initial.center.clone());
        }
        if let (None, Some(h)) = (&c.noise.vertices, &c.noise.half_lengths) {
            if let Ok(p) = VPolytope::from_box(&DVector::from_column_slice(h)) {
                c.noise.vertices = Some(p.vertices().iter().map(|v| v.iter().copied().collect()).collect());
                c.noise.half_lengths = None;
            }
        }
        let canonical = serde_json::to_vec(&c).expect("problem files serialize");
        hex::encode(Sha256::digest(&canonical))
    }

    pub fn validate(&self) -> Result<Problem, ProblemError> {
        let sys = &self.system;
        let (nx, nu, nw) = (sys.n_x, sys.n_u, sys.n_w);
        if nx == 0 {
            return Err(field_err("system.n_x", "must be positive"));
        }

        let inputs = input_set(&self.inputs, nu)?;
        let noise = noise_set(&self.noise, nw)?;
        let spec = self.spec.as_ref().map(|s| spec(s, nx)).transpose()?;

        let domain = match &sys.domain {
            Some(b) => boxed("system.domain", b, nx + nu + nw)?,
            None => default_domain(spec.as_ref(), &inputs, &noise, nx)?,
        };
        let system = dynamics(sys, domain)?;

        let q = match &self.cost.q {
            Some(rows) => matrix("cost.q", rows, nx + nu + 1, nx + nu + 1)?,
            None => DMatrix::identity(nx + nu + 1, nx + nu + 1),
        };
        let cost = factor_stage_cost(&q).map_err(|_| field_err("cost.q", "must be symmetric positive definite"))?;

        let anchor = match &self.inputs.anchor {
            Some(a) => Some(vector("inputs.anchor", a, nu)?),
            None => None,
        };
        let context = TransitionContext::new(system, inputs, noise, cost, anchor)
            .map_err(|e| field_err("system", e.to_string()))?;

        let params = self.build_params()?;
        let solver = BarrierSettings {
            gap_tol: self.tolerances.solver_gap,
            ..BarrierSettings::default()
        };

        let sim = &self.simulation;
        let x0 = match (&sim.x0, &spec) {
            (Some(x), _) => Some(vector("simulation.x0", x, nx)?),
            (None, Some(s)) => Some(s.initial.center().clone()),
            (None, None) => None,
        };
        if sim.grid_res == 1 {
            return Err(field_err("simulation.grid_res", "must be 0 (no grid) or at least 2"));
        }

        let single = self.single_transition.as_ref().map(|s| single(s, nx)).transpose()?;

        Ok(Problem {
            file: self.clone(),
            context,
            spec,
            params,
            solver,
            x0,
            noise: sim.noise,
            single,
        })
    }

    fn build_params(&self) -> Result<BuildParams, ProblemError> {
        let b = &self.build;
        lambda_ok("build.lambda", b.lambda)?;
        if let Some(l) = b.lambda_exploit {
            lambda_ok("build.lambda_exploit", l)?;
        }
        if !(0.0..=1.0).contains(&b.p_goal) {
            return Err(field_err("build.p_goal", "must lie in [0, 1]"));
        }
        if b.max_iters == 0 {
            return Err(field_err("build.max_iters", "must be positive"));
        }
        let t = &self.tolerances;
        for (name, v) in [
            ("membership", t.membership),
            ("symmetry", t.symmetry),
            ("s_procedure", t.s_procedure),
            ("shrink", t.shrink),
            ("secular", t.secular),
            ("lmi_margin", t.lmi_margin),
            ("solver_gap", t.solver_gap),
            ("variable_bound", t.variable_bound),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(field_err(format!("tolerances.{name}"), "must be a positive number"));
            }
        }
        Ok(BuildParams {
            seed: b.seed,
            max_iters: b.max_iters,
            improve_budget: b.improve_budget,
            lambda: match b.lambda_exploit {
                Some(exploit) => LambdaSchedule::TwoPhase {
                    explore: b.lambda,
                    exploit,
                },
                None => LambdaSchedule::Constant(b.lambda),
            },
            k_rewire: b.k_rewire,
            rewire_before_cover: b.rewire_before_cover,
            p_goal: b.p_goal,
            stall_limit: b.stall_limit,
            synthesis: SynthesisConfig {
                max_state_dim: t.max_state_dim,
                variable_bound: t.variable_bound,
                tolerances: Tolerances {
                    membership: t.membership,
                    symmetry: t.symmetry,
                    s_procedure: t.s_procedure,
                    shrink: t.shrink,
                    secular: t.secular,
                    lmi_margin: t.lmi_margin,
                    solver_gap: t.solver_gap,
                },
            },
        })
    }
}

impl Problem {
    pub fn noise_policy(&self, k: usize) -> NoisePolicy {
        match self.noise {
            NoiseMode::Zero => NoisePolicy::Zero,
            NoiseMode::Vertex => NoisePolicy::VertexCycling,
            NoiseMode::Uniform => NoisePolicy::Uniform {
                seed: self.file.simulation.noise_seed + k as u64,
            },
        }
    }
}

fn lambda_ok(field: &str, l: f64) -> Result<(), ProblemError> {
    if l > 0.0 && l < 1.0 {
        Ok(())
    } else {
        Err(field_err(field, "must lie strictly between 0 and 1"))
    }
}

fn finite(field: &str, v: &[f64]) -> Result<(), ProblemError> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(field_err(format!("{field}[{i}]"), "not a finite number")),
        None => Ok(()),
    }
}

fn vector(field: &str, v: &[f64], n: usize) -> Result<DVector<f64>, ProblemError> {
    if v.len() != n {
        return Err(field_err(field, format!("expected {n} entries, found {}", v.len())));
    }
    finite(field, v)?;
    Ok(DVector::from_column_slice(v))
}

fn matrix(field: &str, rows: &[Vec<f64>], r: usize, c: usize) -> Result<DMatrix<f64>, ProblemError> {
    if r != usize::MAX && rows.len() != r {
        return Err(field_err(field, format!("expected {r} rows, found {}", rows.len())));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(field_err(
                format!("{field}[{i}]"),
                format!("expected {c} columns, found {}", row.len()),
            ));
        }
        finite(&format!("{field}[{i}]"), row)?;
    }
    Ok(DMatrix::from_fn(rows.len(), c, |i, j| rows[i][j]))
}

fn boxed(field: &str, b: &BoxSpec, n: usize) -> Result<Hyperrectangle, ProblemError> {
    let c = vector(&format!("{field}.center"), &b.center, n)?;
    let h = vector(&format!("{field}.half"), &b.half, n)?;
    if let Some(i) = h.iter().position(|v| *v < 0.0) {
        return Err(field_err(format!("{field}.half[{i}]"), "must be non-negative"));
    }
    Hyperrectangle::new(c, h).map_err(|e| field_err(field, e.to_string()))
}

fn input_set(s: &InputsSection, nu: usize) -> Result<InputSet, ProblemError> {
    if s.constraints.is_empty() {
        return Err(field_err("inputs.constraints", "at least one matrix is required"));
    }
    let mats = s
        .constraints
        .iter()
        .enumerate()
        .map(|(k, m)| {
            if m.is_empty() {
                return Err(field_err(format!("inputs.constraints[{k}]"), "empty matrix"));
            }
            matrix(&format!("inputs.constraints[{k}]"), m, usize::MAX, nu)
        })
        .collect::<Result<Vec<_>, _>>()?;
    InputSet::new(mats).map_err(|e| field_err("inputs.constraints", e.to_string()))
}

fn noise_set(s: &NoiseSection, nw: usize) -> Result<VPolytope, ProblemError> {
    match (&s.vertices, &s.half_lengths) {
        (Some(v), None) => {
            let verts = v
                .iter()
                .enumerate()
                .map(|(i, p)| vector(&format!("noise.vertices[{i}]"), p, nw))
                .collect::<Result<Vec<_>, _>>()?;
            VPolytope::new(verts).map_err(|e| field_err("noise.vertices", e.to_string()))
        }
        (None, Some(h)) => {
            let h = vector("noise.half_lengths", h, nw)?;
            if let Some(i) = h.iter().position(|v| *v < 0.0) {
                return Err(field_err(format!("noise.half_lengths[{i}]"), "must be non-negative"));
            }
            VPolytope::from_box(&h).map_err(|e| field_err("noise.half_lengths", e.to_string()))
        }
        _ => Err(field_err("noise", "give exactly one of `vertices` or `half_lengths`")),
    }
}

fn spec(s: &SpecSection, nx: usize) -> Result<ReachAvoidSpec, ProblemError> {
    let target = boxed("spec.target", &s.target, nx)?;
    if let Some(i) = target.half_lengths().iter().position(|v| *v <= 0.0) {
        return Err(field_err(format!("spec.target.half[{i}]"), "target box must be full-dimensional"));
    }
    Ok(ReachAvoidSpec {
        state_box: boxed("spec.state_box", &s.state_box, nx)?,
        initial: boxed("spec.initial", &s.initial, nx)?,
        target,
        obstacles: s
            .obstacles
            .iter()
            .enumerate()
            .map(|(i, o)| boxed(&format!("spec.obstacles[{i}]"), o, nx))
            .collect::<Result<_, _>>()?,
    })
}

/// Per-coordinate bound on `u` implied by the constraints that pin it down:
/// full-column-rank `U_k` give `sqrt((U_k' U_k)^-1)_ii`, and a single row
/// with one nonzero entry bounds that coordinate directly.
fn input_bounds(inputs: &InputSet) -> Vec<f64> {
    let n = inputs.dim();
    let mut bound = vec![f64::INFINITY; n];
    for u in inputs.constraints() {
        let g = u.transpose() * u;
        if let Some(inv) = g.clone().try_inverse().filter(|_| u.nrows() >= n) {
            for (i, b) in bound.iter_mut().enumerate() {
                let v = inv[(i, i)];
                if v > 0.0 {
                    *b = b.min(v.sqrt());
                }
            }
        }
        for r in 0..u.nrows() {
            let row = u.row(r);
            let nz: Vec<usize> = (0..n).filter(|&j| row[j] != 0.0).collect();
            if nz.len() == 1 {
                let j = nz[0];
                bound[j] = bound[j].min(1.0 / row[j].abs());
            }
        }
    }
    bound
}

fn default_domain(
    spec: Option<&ReachAvoidSpec>,
    inputs: &InputSet,
    noise: &VPolytope,
    nx: usize,
) -> Result<Hyperrectangle, ProblemError> {
    let Some(spec) = spec else {
        return Err(field_err("system.domain", "required when no [spec] state box is given"));
    };
    let ub = input_bounds(inputs);
    if let Some(i) = ub.iter().position(|b| !b.is_finite()) {
        return Err(field_err(
            "system.domain",
            format!("input {i} is unbounded by the constraints; give the domain explicitly"),
        ));
    }
    let nw = noise.dim();
    let mut lo = vec![f64::INFINITY; nw];
    let mut hi = vec![f64::NEG_INFINITY; nw];
    for v in noise.vertices() {
        for i in 0..nw {
            lo[i] = lo[i].min(v[i]);
            hi[i] = hi[i].max(v[i]);
        }
    }
    let n = nx + ub.len() + nw;
    let mut c = DVector::zeros(n);
    let mut h = DVector::zeros(n);
    c.rows_mut(0, nx).copy_from(spec.state_box.center());
    h.rows_mut(0, nx).copy_from(spec.state_box.half_lengths());
    for (i, b) in ub.iter().enumerate() {
        h[nx + i] = *b;
    }
    for i in 0..nw {
        c[nx + ub.len() + i] = 0.5 * (lo[i] + hi[i]);
        h[nx + ub.len() + i] = 0.5 * (hi[i] - lo[i]);
    }
    Hyperrectangle::new(c, h).map_err(|e| field_err("system.domain", e.to_string()))
}

fn dynamics(sys: &SystemSection, domain: Hyperrectangle) -> Result<PolynomialSystem, ProblemError> {
    let (nx, nu, nw) = (sys.n_x, sys.n_u, sys.n_w);
    if sys.dynamics.len() != nx {
        return Err(field_err(
            "system.dynamics",
            format!("expected {nx} components, found {}", sys.dynamics.len()),
        ));
    }
    let nvars = nx + nu + nw;
    let mut comps = Vec::with_capacity(nx);
    for (i, terms) in sys.dynamics.iter().enumerate() {
        let mut mono = Vec::with_capacity(terms.len());
        for (k, t) in terms.iter().enumerate() {
            let at = format!("system.dynamics[{i}][{k}]");
            if !t.coeff.is_finite() {
                return Err(field_err(format!("{at}.coeff"), "not a finite number"));
            }
            let pad = |name: &str, e: &[u32], n: usize| -> Result<Vec<u32>, ProblemError> {
                match e.len() {
                    0 => Ok(vec![0; n]),
                    l if l == n => Ok(e.to_vec()),
                    l => Err(field_err(format!("{at}.{name}"), format!("expected {n} exponents, found {l}"))),
                }
            };
            let (x, u, w) = (
                pad("x_exp", &t.x_exp, nx)?,
                pad("u_exp", &t.u_exp, nu)?,
                pad("w_exp", &t.w_exp, nw)?,
            );
            mono.push(Monomial::new(t.coeff, &x, &u, &w));
        }
        comps.push(
            Polynomial::new(nvars, mono)
                .map_err(|e| field_err(format!("system.dynamics[{i}]"), e.to_string()))?,
        );
    }
    PolynomialSystem::new(nx, nu, nw, comps, Some(domain)).map_err(|e| field_err("system", e.to_string()))
}

fn single(s: &SingleTransitionSection, nx: usize) -> Result<SingleTransition, ProblemError> {
    lambda_ok("single_transition.lambda", s.lambda)?;
    for (i, l) in s.sweep.iter().enumerate() {
        lambda_ok(&format!("single_transition.sweep[{i}]"), *l)?;
    }
    let c = vector("single_transition.target_center", &s.target_center, nx)?;
    let p = matrix("single_transition.target_shape", &s.target_shape, nx, nx)?;
    let target =
        Ellipsoid::new(c, p).map_err(|e| field_err("single_transition.target_shape", e.to_string()))?;
    Ok(SingleTransition {
        center: vector("single_transition.center", &s.center, nx)?,
        target,
        lambda: s.lambda,
        sweep: s.sweep.clone(),
    })
}
