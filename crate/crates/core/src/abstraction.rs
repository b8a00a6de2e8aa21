//! Backward, RRT*-style construction of an ellipsoidal state-feedback
//! abstraction rooted at the target cell, and its shortest-path value
//! function.

use alloc::collections::BinaryHeap;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::conic::ConicBackend;
use crate::geometry::{
    box_inner_ellipsoid, box_outer_ellipsoid, ellipsoid_distance, ellipsoid_inclusion,
    ellipsoids_disjoint, fit_inside_box, point_to_ellipsoid_distance, shrink_to_avoid, Ellipsoid,
    GeometryError, Hyperrectangle,
};
use crate::synthesis::{
    new_transition, solve_local_problem, AffineController, SynthesisConfig, SynthesisError,
    TransitionContext,
};
use crate::tolerance::Tolerances;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AbstractionError {
    #[error("target box is degenerate along axis {0}")]
    DegenerateTarget(usize),
    #[error("target cell intersects an obstacle")]
    TargetBlocked,
    #[error("state {0} has no path to the root")]
    Unreachable(usize),
    #[error("unknown state id {0}")]
    UnknownState(usize),
    #[error("transition {0} is malformed: {1}")]
    BadTransition(usize, &'static str),
    #[error("iteration cap must be positive")]
    ZeroIterationCap,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AbstractState {
    pub id: usize,
    pub cell: Ellipsoid,
}

/// Deterministic transition `source -> target` under `controller`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractTransition {
    pub source: usize,
    pub target: usize,
    pub controller: AffineController,
    pub cost: f64,
}

/// Rooted digraph of cells. Ids are dense indices in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct Abstraction {
    states: Vec<AbstractState>,
    transitions: Vec<AbstractTransition>,
    root: usize,
}

impl Abstraction {
    pub fn new(root_cell: Ellipsoid) -> Self {
        Self {
            states: vec![AbstractState {
                id: 0,
                cell: root_cell,
            }],
            transitions: Vec::new(),
            root: 0,
        }
    }

    /// Rebuilds an abstraction from stored parts, checking ids, edge
    /// endpoints and reachability of the root.
    pub fn from_parts(
        states: Vec<Ellipsoid>,
        transitions: Vec<AbstractTransition>,
        root: usize,
    ) -> Result<Self, AbstractionError> {
        if root >= states.len() {
            return Err(AbstractionError::UnknownState(root));
        }
        let n = states[0].dim();
        for (k, t) in transitions.iter().enumerate() {
            if t.source >= states.len() || t.target >= states.len() {
                return Err(AbstractionError::BadTransition(k, "endpoint out of range"));
            }
            if t.source == root {
                return Err(AbstractionError::BadTransition(k, "leaves the root"));
            }
            if t.cost.is_nan() || t.cost < 0.0 {
                return Err(AbstractionError::BadTransition(k, "negative cost"));
            }
            if t.controller.center.len() != n || t.controller.gain.ncols() != n {
                return Err(AbstractionError::BadTransition(k, "controller dimension"));
            }
        }
        let abs = Self {
            states: states
                .into_iter()
                .enumerate()
                .map(|(id, cell)| AbstractState { id, cell })
                .collect(),
            transitions,
            root,
        };
        value_function(&abs)?;
        Ok(abs)
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn states(&self) -> &[AbstractState] {
        &self.states
    }

    pub fn state(&self, id: usize) -> Option<&AbstractState> {
        self.states.get(id)
    }

    pub fn transitions(&self) -> &[AbstractTransition] {
        &self.transitions
    }

    pub fn outgoing(&self, id: usize) -> impl Iterator<Item = (usize, &AbstractTransition)> {
        self.transitions
            .iter()
            .enumerate()
            .filter(move |(_, t)| t.source == id)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Inserts a cell with its first outgoing transition.
    pub fn insert(&mut self, cell: Ellipsoid, target: usize, controller: AffineController, cost: f64) -> usize {
        let id = self.states.len();
        self.states.push(AbstractState { id, cell });
        self.transitions.push(AbstractTransition {
            source: id,
            target,
            controller,
            cost,
        });
        id
    }

    pub fn add_transition(&mut self, t: AbstractTransition) {
        self.transitions.push(t);
    }

    /// True when no state has more than one outgoing edge.
    pub fn is_tree(&self) -> bool {
        let mut out = vec![0usize; self.states.len()];
        for t in &self.transitions {
            out[t.source] += 1;
        }
        out.iter().enumerate().all(|(id, k)| {
            if id == self.root {
                *k == 0
            } else {
                *k == 1
            }
        })
    }
}

/// Conservative ellipsoidal version of a box reach-avoid specification.
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractSpec {
    pub xi_i: Ellipsoid,
    pub xi_t: Ellipsoid,
    pub xi_o: Vec<Ellipsoid>,
}

/// Box specification: reach `target` from `initial` while avoiding the
/// obstacles, inside `state_box`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachAvoidSpec {
    pub state_box: Hyperrectangle,
    pub initial: Hyperrectangle,
    pub target: Hyperrectangle,
    pub obstacles: Vec<Hyperrectangle>,
}

/// Zero half-lengths are widened to a negligible positive value so the
/// circumscribed ellipsoid exists; this only enlarges the cover.
fn widened(h: &Hyperrectangle) -> Hyperrectangle {
    let half = DVector::from_fn(h.dim(), |i, _| {
        let v = h.half_lengths()[i];
        if v > 0.0 {
            v
        } else {
            1e-9 * (1.0 + h.center()[i].abs())
        }
    });
    Hyperrectangle::new(h.center().clone(), half).expect("positive half-lengths")
}

/// `xi_I ⊇ X_I` and `xi_O ⊇ X_O` (circumscribed), `xi_T ⊆ X_T` (inscribed).
pub fn get_abs_specification(spec: &ReachAvoidSpec) -> Result<AbstractSpec, AbstractionError> {
    if let Some(i) = spec.target.half_lengths().iter().position(|v| *v <= 0.0) {
        return Err(AbstractionError::DegenerateTarget(i));
    }
    let xi_t = box_inner_ellipsoid(&spec.target)?;
    let xi_i = box_outer_ellipsoid(&widened(&spec.initial))?;
    let xi_o = spec
        .obstacles
        .iter()
        .map(|o| box_outer_ellipsoid(&widened(o)))
        .collect::<Result<Vec<_>, _>>()?;
    for o in &xi_o {
        if !ellipsoids_disjoint(&xi_t, o)? {
            return Err(AbstractionError::TargetBlocked);
        }
    }
    Ok(AbstractSpec { xi_i, xi_t, xi_o })
}

/// With probability `p_goal` a uniform point of `initial`, otherwise a
/// uniform point of `state_box`.
pub fn sample_state<R: Rng + ?Sized>(
    rng: &mut R,
    state_box: &Hyperrectangle,
    initial: &Hyperrectangle,
    p_goal: f64,
) -> DVector<f64> {
    if rng.random::<f64>() < p_goal {
        initial.sample_uniform(rng)
    } else {
        state_box.sample_uniform(rng)
    }
}

/// What [`k_closest`] measures distance to.
#[derive(Debug, Clone, Copy)]
pub enum Query<'a> {
    Point(&'a DVector<f64>),
    Cell(&'a Ellipsoid),
}

fn by_distance(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Ids of the `k` states closest to the query in Euclidean set distance,
/// ties broken by smaller id. Cell queries are pre-ranked by the centre
/// distance minus the query's largest semi-axis and only the best `3k`
/// candidates are measured exactly.
pub fn k_closest(states: &[AbstractState], query: Query<'_>, k: usize) -> Result<Vec<usize>, GeometryError> {
    let mut ranked: Vec<(f64, usize)> = match query {
        Query::Point(x) => states
            .iter()
            .map(|s| point_to_ellipsoid_distance(x, &s.cell).map(|d| (d, s.id)))
            .collect::<Result<_, _>>()?,
        Query::Cell(q) => {
            let reach = q.semi_axes().iter().copied().fold(0.0, f64::max);
            let mut coarse: Vec<(f64, usize)> = states
                .iter()
                .enumerate()
                .map(|(pos, s)| ((s.cell.center() - q.center()).norm() - reach, pos))
                .collect();
            coarse.sort_by(|a, b| a.0.total_cmp(&b.0).then(states[a.1].id.cmp(&states[b.1].id)));
            coarse.truncate(3 * k);
            coarse
                .into_iter()
                .map(|(_, pos)| ellipsoid_distance(&states[pos].cell, q).map(|d| (d, states[pos].id)))
                .collect::<Result<_, _>>()?
        }
    };
    ranked.sort_by(by_distance);
    Ok(ranked.into_iter().take(k).map(|(_, id)| id).collect())
}

/// Guaranteed cost-to-root per state and the edge realizing it.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    values: Vec<f64>,
    best: Vec<Option<usize>>,
}

impl ValueTable {
    pub fn value(&self, id: usize) -> f64 {
        self.values[id]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Index of the transition that attains the value of `id`.
    pub fn best_transition(&self, id: usize) -> Option<usize> {
        self.best[id]
    }
}

#[derive(PartialEq)]
struct Pending(f64, usize);

impl Eq for Pending {}

impl Ord for Pending {
    fn cmp(&self, o: &Self) -> Ordering {
        // Min-heap on value, then id.
        o.0.total_cmp(&self.0).then(o.1.cmp(&self.1))
    }
}

impl PartialOrd for Pending {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

/// Dijkstra from the root over reversed edges weighted by their costs.
/// Among optimal edges the one with the smallest index is recorded.
pub fn value_function(abs: &Abstraction) -> Result<ValueTable, AbstractionError> {
    let n = abs.states.len();
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (k, t) in abs.transitions.iter().enumerate() {
        incoming[t.target].push(k);
    }
    let mut values = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    values[abs.root] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Pending(0.0, abs.root));
    while let Some(Pending(v, id)) = heap.pop() {
        if done[id] {
            continue;
        }
        done[id] = true;
        for &k in &incoming[id] {
            let t = &abs.transitions[k];
            let cand = v + t.cost;
            if cand < values[t.source] {
                values[t.source] = cand;
                heap.push(Pending(cand, t.source));
            }
        }
    }
    if let Some(id) = values.iter().position(|v| v.is_infinite()) {
        return Err(AbstractionError::Unreachable(id));
    }
    let mut best = vec![None; n];
    for (k, t) in abs.transitions.iter().enumerate() {
        let through = t.cost + values[t.target];
        let slack = 1e-12 * values[t.source].max(1.0);
        if best[t.source].is_none() && through <= values[t.source] + slack {
            best[t.source] = Some(k);
        }
    }
    Ok(ValueTable { values, best })
}

/// Trade-off weight used by the builder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LambdaSchedule {
    Constant(f64),
    /// `explore` until the initial set is first covered, `exploit` after.
    TwoPhase { explore: f64, exploit: f64 },
}

impl LambdaSchedule {
    pub fn lambda(&self, covered: bool) -> f64 {
        match *self {
            LambdaSchedule::Constant(l) => l,
            LambdaSchedule::TwoPhase { explore, exploit } => {
                if covered {
                    exploit
                } else {
                    explore
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildParams {
    pub seed: u64,
    /// Sampling attempts allowed before the initial set is covered.
    pub max_iters: usize,
    /// Extra sampling attempts after coverage (0 stops at first coverage).
    pub improve_budget: usize,
    pub lambda: LambdaSchedule,
    /// Neighbours tried by each rewiring pass.
    pub k_rewire: usize,
    /// Also rewire while growing towards the initial set.
    pub rewire_before_cover: bool,
    pub p_goal: f64,
    /// Consecutive infeasible local problems before `p_goal` is doubled.
    pub stall_limit: usize,
    pub synthesis: SynthesisConfig,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iters: 500,
            improve_budget: 0,
            lambda: LambdaSchedule::Constant(0.01),
            k_rewire: 3,
            rewire_before_cover: false,
            p_goal: 0.2,
            stall_limit: 50,
            synthesis: SynthesisConfig::default(),
        }
    }
}

/// Everything the builder needs about the system and the task.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachAvoidProblem {
    pub context: TransitionContext,
    pub spec: ReachAvoidSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuildStatus {
    Covered,
    IterationCapReached,
}

/// Counters collected while building.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BuildStats {
    pub iterations: usize,
    pub infeasible: usize,
    pub blocked: usize,
    pub inserted: usize,
    pub rewires_tried: usize,
    pub rewires_accepted: usize,
}

/// Snapshot of the abstraction when the initial set is first covered.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstCover {
    pub iteration: usize,
    pub abstraction: Abstraction,
    pub values: ValueTable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildOutcome {
    pub status: BuildStatus,
    pub abstraction: Abstraction,
    pub values: ValueTable,
    pub spec: AbstractSpec,
    pub first_cover: Option<FirstCover>,
    pub stats: BuildStats,
}

fn covers(abs: &Abstraction, xi_i: &Ellipsoid) -> Result<bool, GeometryError> {
    for s in &abs.states {
        if ellipsoid_inclusion(xi_i, &s.cell)? {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Tries transitions from the `k` cells nearest to `new_id` into it and
/// keeps those that strictly lower the neighbour's value. Returns the
/// numbers of attempted and accepted rewires; `values` is refreshed.
pub fn improve_abs<B: ConicBackend + ?Sized>(
    abs: &mut Abstraction,
    values: &mut ValueTable,
    new_id: usize,
    k: usize,
    ctx: &TransitionContext,
    backend: &mut B,
    cfg: &SynthesisConfig,
) -> Result<(usize, usize), AbstractionError> {
    let new_cell = abs.states[new_id].cell.clone();
    let others: Vec<AbstractState> = abs
        .states
        .iter()
        .filter(|s| s.id != new_id && s.id != abs.root)
        .cloned()
        .collect();
    let v_new = values.value(new_id);
    let (mut tried, mut accepted) = (0, 0);
    let mut additions = Vec::new();
    for id in k_closest(&others, Query::Cell(&new_cell), k)? {
        let source = &abs.states[id].cell;
        // Costs are nonnegative, so no edge can help such a neighbour.
        if values.value(id) <= v_new {
            continue;
        }
        tried += 1;
        let p = ctx.local_problem(source.center(), &new_cell, 1.0)?;
        match new_transition(source, &p, backend, cfg) {
            Ok(t) if t.j_bound + v_new < values.value(id) => {
                accepted += 1;
                additions.push(AbstractTransition {
                    source: id,
                    target: new_id,
                    controller: t.controller,
                    cost: t.j_bound,
                });
            }
            Ok(_) | Err(SynthesisError::Infeasible) | Err(SynthesisError::NumericalFailure) => {}
            Err(e) => return Err(e.into()),
        }
    }
    for t in additions {
        abs.add_transition(t);
    }
    if accepted > 0 {
        *values = value_function(abs)?;
    }
    Ok((tried, accepted))
}

/// Lazy backward construction: sample a centre, target the nearest cell,
/// solve the local problem, shrink the cell into the state box and away
/// from obstacles, insert, and stop once a cell contains `xi_I` (or after
/// the improvement budget).
pub fn build_abstraction<B: ConicBackend + ?Sized>(
    problem: &ReachAvoidProblem,
    params: &BuildParams,
    backend: &mut B,
) -> Result<BuildOutcome, AbstractionError> {
    if params.max_iters == 0 {
        return Err(AbstractionError::ZeroIterationCap);
    }
    let spec = get_abs_specification(&problem.spec)?;
    let ctx = &problem.context;
    let tol: Tolerances = params.synthesis.tolerances;
    let mut abs = Abstraction::new(spec.xi_t.clone());
    let mut values = value_function(&abs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut stats = BuildStats::default();
    let mut first_cover = None;
    let mut stall = 0usize;

    if covers(&abs, &spec.xi_i)? {
        first_cover = Some(FirstCover {
            iteration: 0,
            abstraction: abs.clone(),
            values: values.clone(),
        });
    }
    let mut remaining = params.max_iters;
    loop {
        if first_cover.is_some() && remaining > params.improve_budget {
            remaining = params.improve_budget;
        }
        if remaining == 0 {
            break;
        }
        remaining -= 1;
        stats.iterations += 1;
        let covered = first_cover.is_some();

        // Boosted for one window of `stall_limit` draws, then back to normal.
        let boosted = params.stall_limit > 0 && (stall / params.stall_limit) % 2 == 1;
        let p_goal = if boosted {
            (2.0 * params.p_goal).min(1.0)
        } else {
            params.p_goal
        };
        let c = sample_state(&mut rng, &problem.spec.state_box, &problem.spec.initial, p_goal);
        if spec.xi_o.iter().any(|o| o.quad_form(&c) <= 1.0) {
            stats.blocked += 1;
            continue;
        }
        let target = k_closest(&abs.states, Query::Point(&c), 1)?[0];
        let lambda = params.lambda.lambda(covered);
        let p = ctx.local_problem(&c, &abs.states[target].cell, lambda)?;
        let sol = match solve_local_problem(&p, backend, &params.synthesis) {
            Ok(s) => s,
            Err(SynthesisError::Infeasible) | Err(SynthesisError::NumericalFailure) => {
                stats.infeasible += 1;
                stall += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        stall = 0;
        let boxed = match fit_inside_box(&sol.cell, &problem.spec.state_box) {
            Ok(s) => s.ellipsoid,
            Err(GeometryError::CenterBlocked) => {
                stats.blocked += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let cell = match shrink_to_avoid(&boxed, &spec.xi_o, &tol) {
            Ok(s) => s.ellipsoid,
            Err(GeometryError::CenterBlocked) => {
                stats.blocked += 1;
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let id = abs.insert(cell, target, sol.controller, sol.j_bound);
        stats.inserted += 1;
        values = value_function(&abs)?;
        if covered || params.rewire_before_cover {
            let (tried, accepted) = improve_abs(
                &mut abs,
                &mut values,
                id,
                params.k_rewire,
                ctx,
                backend,
                &params.synthesis,
            )?;
            stats.rewires_tried += tried;
            stats.rewires_accepted += accepted;
        }
        if first_cover.is_none() && covers(&abs, &spec.xi_i)? {
            first_cover = Some(FirstCover {
                iteration: stats.iterations,
                abstraction: abs.clone(),
                values: values.clone(),
            });
        }
    }
    Ok(BuildOutcome {
        status: if first_cover.is_some() {
            BuildStatus::Covered
        } else {
            BuildStatus::IterationCapReached
        },
        abstraction: abs,
        values,
        spec,
        first_cover,
        stats,
    })
}
