//! Concrete controller obtained from an abstraction, value refinement,
//! closed-loop simulation and trajectory certification.

use alloc::vec::Vec;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::abstraction::{Abstraction, ValueTable};
use crate::dynamics::{DynamicsError, PolynomialSystem};
use crate::geometry::{Hyperrectangle, VPolytope};
use crate::synthesis::StageCost;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("state is not covered by any cell")]
    OutsideDomain,
    #[error("left the covered domain at step {0}")]
    LeftDomain(usize),
    #[error("target not reached within {0} steps")]
    MaxSteps(usize),
    #[error("cell {0} has no outgoing transition")]
    NoTransition(usize),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// `C(x) = kappa*(x)` where `xi*` is the covering cell of least value.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcreteController {
    abstraction: Abstraction,
    values: ValueTable,
}

impl ConcreteController {
    pub fn new(abstraction: Abstraction, values: ValueTable) -> Self {
        Self { abstraction, values }
    }

    pub fn abstraction(&self) -> &Abstraction {
        &self.abstraction
    }

    pub fn values(&self) -> &ValueTable {
        &self.values
    }

    /// Covering cell of least value, ties to the smaller id.
    pub fn select_cell(&self, x: &DVector<f64>) -> Result<usize, RuntimeError> {
        let mut best: Option<(f64, usize)> = None;
        for s in self.abstraction.states() {
            if s.cell.quad_form(x) <= 1.0 + 1e-9 {
                let v = self.values.value(s.id);
                if best.is_none_or(|(bv, _)| v < bv) {
                    best = Some((v, s.id));
                }
            }
        }
        best.map(|(_, id)| id).ok_or(RuntimeError::OutsideDomain)
    }

    /// Input and selected cell at `x`. The root cell carries no law and
    /// yields `None` for the input.
    pub fn concretize(&self, x: &DVector<f64>) -> Result<(Option<DVector<f64>>, usize), RuntimeError> {
        let id = self.select_cell(x)?;
        if id == self.abstraction.root() {
            return Ok((None, id));
        }
        let k = self
            .values
            .best_transition(id)
            .ok_or(RuntimeError::NoTransition(id))?;
        let u = self.abstraction.transitions()[k].controller.apply(x);
        Ok((Some(u), id))
    }

    /// `v(x) = min { v~(xi) : x in xi }`.
    pub fn refine_value(&self, x: &DVector<f64>) -> Result<f64, RuntimeError> {
        Ok(self.values.value(self.select_cell(x)?))
    }
}

/// How disturbances are drawn during simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoisePolicy {
    Zero,
    Uniform { seed: u64 },
    /// Cycles through the vertices of `W` in order.
    VertexCycling,
}

struct NoiseSource<'a> {
    policy: NoisePolicy,
    set: &'a VPolytope,
    rng: ChaCha8Rng,
    step: usize,
}

impl<'a> NoiseSource<'a> {
    fn new(policy: NoisePolicy, set: &'a VPolytope) -> Self {
        let seed = match policy {
            NoisePolicy::Uniform { seed } => seed,
            _ => 0,
        };
        Self {
            policy,
            set,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
        }
    }

    fn next(&mut self) -> DVector<f64> {
        let w = match self.policy {
            NoisePolicy::Zero => DVector::zeros(self.set.dim()),
            NoisePolicy::Uniform { .. } => self.set.sample(&mut self.rng),
            NoisePolicy::VertexCycling => {
                let v = self.set.vertices();
                v[self.step % v.len()].clone()
            }
        };
        self.step += 1;
        w
    }
}

/// Closed-loop run. `states` has one more entry than the per-step logs.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    pub cells: Vec<usize>,
    pub stage_costs: Vec<f64>,
    /// `v(x(k))` for every logged state; zero once the target is reached.
    pub values: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.inputs.len()
    }

    pub fn total_cost(&self) -> f64 {
        self.stage_costs.iter().sum()
    }

    pub fn cumulative_costs(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.stage_costs
            .iter()
            .map(|c| {
                acc += c;
                acc
            })
            .collect()
    }
}

/// Static data of a closed loop.
#[derive(Debug, Clone, Copy)]
pub struct ClosedLoop<'a> {
    pub system: &'a PolynomialSystem,
    pub controller: &'a ConcreteController,
    pub cost: &'a StageCost,
    pub disturbances: &'a VPolytope,
    pub target: &'a Hyperrectangle,
}

impl ClosedLoop<'_> {
    fn reached(&self, x: &DVector<f64>) -> bool {
        self.target.contains(x) || {
            let root = self.controller.abstraction.root();
            self.controller.abstraction.states()[root].cell.quad_form(x) <= 1.0
        }
    }

    /// Iterates `x+ = f(x, C(x), w)` until the target is reached.
    pub fn simulate(&self, x0: &DVector<f64>, noise: NoisePolicy, max_steps: usize) -> Result<Trajectory, RuntimeError> {
        let mut source = NoiseSource::new(noise, self.disturbances);
        let mut t = Trajectory {
            states: alloc::vec![x0.clone()],
            inputs: Vec::new(),
            disturbances: Vec::new(),
            cells: Vec::new(),
            stage_costs: Vec::new(),
            values: Vec::new(),
        };
        let mut x = x0.clone();
        for step in 0..=max_steps {
            if self.reached(&x) {
                t.values.push(0.0);
                return Ok(t);
            }
            if step == max_steps {
                break;
            }
            let (u, cell) = self.controller.concretize(&x).map_err(|e| match e {
                RuntimeError::OutsideDomain => RuntimeError::LeftDomain(step),
                e => e,
            })?;
            let u = u.ok_or(RuntimeError::NoTransition(cell))?;
            t.values.push(self.controller.values.value(cell));
            let w = source.next();
            let next = self.system.eval(&x, &u, &w)?;
            t.stage_costs.push(self.cost.eval(&x, &u));
            t.inputs.push(u);
            t.disturbances.push(w);
            t.cells.push(cell);
            t.states.push(next.clone());
            x = next;
        }
        Err(RuntimeError::MaxSteps(max_steps))
    }
}

/// Outcome of [`certify_trajectory`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Certificate {
    Pass,
    /// First step at which the Bellman inequality fails.
    BellmanViolated { step: usize },
    /// First step at which the selected cell's value does not decrease.
    NoProgress { step: usize },
}

impl Certificate {
    pub fn passed(&self) -> bool {
        matches!(self, Certificate::Pass)
    }
}

/// Checks `v(x(k)) >= J(x(k), u(k)) + v(x(k+1)) - 1e-6` using the logged
/// stage costs, and strict decrease of the selected cells' values.
pub fn certify_trajectory(t: &Trajectory, controller: &ConcreteController) -> Certificate {
    let n = t.steps();
    // The final state has value zero once it is in the target.
    let value = |k: usize| -> f64 {
        if k == n && t.values.len() > n {
            t.values[n]
        } else {
            controller.refine_value(&t.states[k]).unwrap_or(f64::INFINITY)
        }
    };
    for k in 0..n {
        if value(k) < t.stage_costs[k] + value(k + 1) - 1e-6 {
            return Certificate::BellmanViolated { step: k };
        }
        if k + 1 < n {
            let a = controller.values.value(t.cells[k]);
            let b = controller.values.value(t.cells[k + 1]);
            if b >= a {
                return Certificate::NoProgress { step: k + 1 };
            }
        }
    }
    Certificate::Pass
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::value_function;
    use alloc::vec;
    use crate::geometry::Ellipsoid;
    use crate::synthesis::{factor_stage_cost, AffineController};
    use nalgebra::{dmatrix, dvector, DMatrix};

    fn ball(c: f64) -> Ellipsoid {
        Ellipsoid::ball(dvector![c], 1.0).unwrap()
    }

    // u = -(x - c) - c sends every point of the cell to the origin.
    fn to_origin(c: f64) -> AffineController {
        AffineController {
            gain: dmatrix![-1.0],
            offset: dvector![-c],
            center: dvector![c],
        }
    }

    fn overlap() -> ConcreteController {
        let mut a = Abstraction::new(ball(0.0));
        a.insert(ball(4.0), 0, to_origin(4.0), 3.0);
        a.insert(ball(4.5), 0, to_origin(4.5), 5.0);
        let v = value_function(&a).unwrap();
        ConcreteController::new(a, v)
    }

    fn integrator() -> PolynomialSystem {
        PolynomialSystem::linear(&dmatrix![1.0], &dmatrix![1.0], &dmatrix![1.0], None).unwrap()
    }

    #[test]
    fn overlap_picks_lower_value() {
        let c = overlap();
        let x = dvector![4.2];
        assert_eq!(c.select_cell(&x).unwrap(), 1);
        assert_eq!(c.refine_value(&x).unwrap(), 3.0);
        let (u, id) = c.concretize(&x).unwrap();
        assert_eq!(id, 1);
        assert!((u.unwrap()[0] + 4.2).abs() < 1e-12);
    }

    #[test]
    fn center_maps_to_offset() {
        let c = chain();
        let (u, id) = c.concretize(&dvector![12.0]).unwrap();
        assert_eq!((u.unwrap(), id), (dvector![-4.0], 3));
    }

    #[test]
    fn root_value_is_zero_and_outside_errors() {
        let c = overlap();
        assert_eq!(c.refine_value(&dvector![0.3]).unwrap(), 0.0);
        assert_eq!(c.concretize(&dvector![0.3]).unwrap(), (None, 0));
        assert_eq!(c.select_cell(&dvector![-3.0]), Err(RuntimeError::OutsideDomain));
    }

    #[test]
    fn start_in_target_is_empty() {
        let c = overlap();
        let sys = integrator();
        let cost = factor_stage_cost(&DMatrix::identity(3, 3)).unwrap();
        let w = VPolytope::from_box(&dvector![0.1]).unwrap();
        let target = Hyperrectangle::new(dvector![0.0], dvector![1.0]).unwrap();
        let lp = ClosedLoop { system: &sys, controller: &c, cost: &cost, disturbances: &w, target: &target };
        let t = lp.simulate(&dvector![0.5], NoisePolicy::Zero, 10).unwrap();
        assert_eq!(t.steps(), 0);
        assert_eq!(t.total_cost(), 0.0);
        assert!(certify_trajectory(&t, &c).passed());
        assert_eq!(lp.simulate(&dvector![9.0], NoisePolicy::Zero, 10), Err(RuntimeError::LeftDomain(0)));
    }

    fn chain() -> ConcreteController {
        // Cells at 8, 4 and the root at 0, each one step of -4 apart.
        let step = |c: f64| AffineController {
            gain: dmatrix![0.0],
            offset: dvector![-4.0],
            center: dvector![c],
        };
        let mut a = Abstraction::new(ball(0.0));
        let one = a.insert(ball(4.0), 0, step(4.0), 40.0);
        let two = a.insert(ball(8.0), one, step(8.0), 90.0);
        a.insert(Ellipsoid::ball(dvector![12.0], 1.0).unwrap(), two, step(12.0), 170.0);
        let v = value_function(&a).unwrap();
        ConcreteController::new(a, v)
    }

    #[test]
    fn corrupted_cost_fails_at_that_step() {
        let c = chain();
        let sys = integrator();
        let cost = factor_stage_cost(&DMatrix::identity(3, 3)).unwrap();
        let w = VPolytope::from_box(&dvector![0.1]).unwrap();
        let target = Hyperrectangle::new(dvector![0.0], dvector![1.0]).unwrap();
        let lp = ClosedLoop { system: &sys, controller: &c, cost: &cost, disturbances: &w, target: &target };
        let mut t = lp.simulate(&dvector![12.0], NoisePolicy::VertexCycling, 10).unwrap();
        assert_eq!(t.steps(), 3);
        assert!(certify_trajectory(&t, &c).passed());
        t.stage_costs[2] += 1e3;
        assert_eq!(certify_trajectory(&t, &c), Certificate::BellmanViolated { step: 2 });
    }

    #[test]
    fn zero_noise_matches_direct_iteration() {
        let c = chain();
        let sys = integrator();
        let cost = factor_stage_cost(&DMatrix::identity(3, 3)).unwrap();
        let w = VPolytope::from_box(&dvector![0.1]).unwrap();
        let target = Hyperrectangle::new(dvector![0.0], dvector![1.0]).unwrap();
        let lp = ClosedLoop { system: &sys, controller: &c, cost: &cost, disturbances: &w, target: &target };
        let t = lp.simulate(&dvector![12.3], NoisePolicy::Zero, 10).unwrap();
        // x+ = x - 4 until |x| <= 1, cost x^2 + u^2 + 1.
        let (mut x, mut total, mut n) = (12.3f64, 0.0, 0);
        while x.abs() > 1.0 {
            total += x * x + 16.0 + 1.0;
            x -= 4.0;
            n += 1;
        }
        assert_eq!(t.steps(), n);
        assert!((t.total_cost() - total).abs() < 1e-9);
        assert!((t.states[n][0] - x).abs() < 1e-12);
    }

    #[test]
    fn vertex_cycling_stays_in_set() {
        let w = VPolytope::from_box(&dvector![0.1, 0.2]).unwrap();
        let mut src = NoiseSource::new(NoisePolicy::VertexCycling, &w);
        let first: Vec<_> = (0..4).map(|_| src.next()).collect();
        assert_eq!(first, w.vertices().to_vec());
        assert_eq!(src.next(), w.vertices()[0]);
    }
}
