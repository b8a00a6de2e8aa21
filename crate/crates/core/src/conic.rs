//! Small dense semidefinite programs and the solver interface used by the
//! local synthesis.
//!
//! A [`ConicProgram`] minimizes `c'x - w * log det M0(x)` subject to affine
//! matrix inequalities `Mj(x) ⪰ margin * I` and optional variable bounds.
//! [`BarrierSolver`] solves it with a primal log-barrier path-following
//! method: a phase-I program finds a strictly feasible point and Newton
//! centering steps follow the central path until the duality-gap bound
//! `m / t` is below the requested tolerance.

use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)]
use num_traits::Float;

use crate::tolerance::Tolerances;

/// Affine symmetric matrix function `C + sum_k x_k A_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmiBlock {
    pub label: String,
    pub constant: DMatrix<f64>,
    /// Sparse list of `(variable index, coefficient matrix)`.
    pub terms: Vec<(usize, DMatrix<f64>)>,
}

impl LmiBlock {
    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn eval(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (k, a) in &self.terms {
            m += a * x[*k];
        }
        m
    }
}

/// Description of one convex program; the unit of exchange with a backend
/// and the content of the optional debug dump.
#[derive(Debug, Clone, PartialEq)]
pub struct ConicProgram {
    pub var_names: Vec<String>,
    /// Linear objective coefficients.
    pub objective: DVector<f64>,
    /// `(weight, M0)`: adds `-weight * log det M0(x)` to the objective.
    pub log_det: Option<(f64, LmiBlock)>,
    pub blocks: Vec<LmiBlock>,
    /// Per-variable `(lower, upper)`; infinite entries are ignored.
    pub bounds: Vec<(f64, f64)>,
    /// Every block is imposed as `Mj(x) ⪰ margin * I`.
    pub margin: f64,
    /// Optional starting guess for phase I.
    pub initial: Option<DVector<f64>>,
}

impl ConicProgram {
    pub fn num_vars(&self) -> usize {
        self.var_names.len()
    }

    pub fn objective_value(&self, x: &DVector<f64>) -> f64 {
        let mut v = self.objective.dot(x);
        if let Some((w, m0)) = &self.log_det {
            v -= w * log_det(&m0.eval(x)).unwrap_or(f64::NEG_INFINITY);
        }
        v
    }

    /// Largest violation `max(0, margin - lambda_min(Mj(x)))` over the
    /// non-constant blocks and the variable bounds.
    pub fn residual(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for b in self.blocks.iter().filter(|b| !b.is_constant()) {
            worst = worst.max(self.margin - min_eigenvalue(&b.eval(x)));
        }
        for (i, (lo, hi)) in self.bounds.iter().enumerate() {
            worst = worst.max(lo - x[i]).max(x[i] - hi);
        }
        worst
    }

    /// Plain-text listing of the program: variables with bounds, the
    /// objective, then every block as its constant and nonzero coefficient
    /// matrices in row-major order.
    pub fn write_text<W: core::fmt::Write>(&self, out: &mut W) -> core::fmt::Result {
        writeln!(out, "vars {}", self.num_vars())?;
        for (i, name) in self.var_names.iter().enumerate() {
            let (lo, hi) = self.bounds.get(i).copied().unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
            writeln!(out, "{i} {name} [{lo:e}, {hi:e}] c={:e}", self.objective[i])?;
        }
        writeln!(out, "margin {:e}", self.margin)?;
        if let Some((w, m0)) = &self.log_det {
            writeln!(out, "logdet weight {w:e}")?;
            write_block(out, m0)?;
        }
        writeln!(out, "blocks {}", self.blocks.len())?;
        for b in &self.blocks {
            write_block(out, b)?;
        }
        Ok(())
    }
}

fn write_matrix<W: core::fmt::Write>(out: &mut W, m: &DMatrix<f64>) -> core::fmt::Result {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            if c > 0 {
                out.write_char(' ')?;
            }
            write!(out, "{:e}", m[(r, c)])?;
        }
        out.write_char('\n')?;
    }
    Ok(())
}

fn write_block<W: core::fmt::Write>(out: &mut W, b: &LmiBlock) -> core::fmt::Result {
    writeln!(out, "block {} dim {} terms {}", b.label, b.dim(), b.terms.len())?;
    write_matrix(out, &b.constant)?;
    for (k, a) in &b.terms {
        writeln!(out, "x{k}")?;
        write_matrix(out, a)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConicSolution {
    pub status: SolveStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    pub residual: f64,
    pub newton_steps: usize,
}

/// A solver able to handle [`ConicProgram`]s. One instance per worker.
pub trait ConicBackend {
    fn solve(&mut self, program: &ConicProgram) -> ConicSolution;
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

fn log_det(m: &DMatrix<f64>) -> Option<f64> {
    let chol = m.clone().cholesky()?;
    Some(2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierSettings {
    /// Factor by which `t` grows between centering phases.
    pub mu: f64,
    pub max_newton: usize,
    pub max_outer: usize,
    pub gap_tol: f64,
}

impl Default for BarrierSettings {
    fn default() -> Self {
        Self {
            mu: 20.0,
            max_newton: 400,
            max_outer: 60,
            gap_tol: Tolerances::default().solver_gap,
        }
    }
}

/// Primal log-barrier interior-point method for small dense LMIs.
#[derive(Debug, Clone, Default)]
pub struct BarrierSolver {
    pub settings: BarrierSettings,
}

impl BarrierSolver {
    pub fn new(settings: BarrierSettings) -> Self {
        Self { settings }
    }
}

/// Internal view: blocks shifted by the margin, optional phase-I variable.
struct Barrier<'a> {
    blocks: Vec<&'a LmiBlock>,
    shift: f64,
    /// Index of the phase-I slack `s` entering every block as `s I`.
    slack: Option<usize>,
    /// In phase I the log-det block is an ordinary constraint.
    log_det: Option<(f64, &'a LmiBlock)>,
    bounds: Vec<(usize, f64, f64)>,
    objective: DVector<f64>,
    n: usize,
}

/// Value, gradient and Hessian accumulators.
struct Model {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

impl Barrier<'_> {
    fn shifted(&self, b: &LmiBlock, x: &DVector<f64>, shift: f64) -> DMatrix<f64> {
        let mut m = b.eval(x);
        let d = m.nrows();
        let s = self.slack.map(|k| x[k]).unwrap_or(0.0);
        for i in 0..d {
            m[(i, i)] += s - shift;
        }
        m
    }

    /// Barrier degree `m`: the duality gap on the central path is `m / t`.
    fn degree(&self) -> f64 {
        let blocks: usize = self.blocks.iter().map(|b| b.dim()).sum();
        let ld = if self.slack.is_some() {
            self.log_det.map(|(_, b)| b.dim()).unwrap_or(0)
        } else {
            0
        };
        let bounds: usize = self
            .bounds
            .iter()
            .map(|(_, lo, hi)| lo.is_finite() as usize + hi.is_finite() as usize)
            .sum();
        (blocks + ld + bounds) as f64
    }

    fn strictly_feasible(&self, x: &DVector<f64>) -> bool {
        for b in &self.blocks {
            if self.shifted(b, x, self.shift).cholesky().is_none() {
                return false;
            }
        }
        if let Some((_, b)) = self.log_det {
            let shift = if self.slack.is_some() { self.shift } else { 0.0 };
            let m = if self.slack.is_some() {
                self.shifted(b, x, shift)
            } else {
                b.eval(x)
            };
            if m.cholesky().is_none() {
                return false;
            }
        }
        self.bounds
            .iter()
            .all(|(k, lo, hi)| x[*k] > *lo && x[*k] < *hi)
    }

    /// `t * f0(x) + phi(x)`; `None` outside the domain.
    fn value(&self, x: &DVector<f64>, t: f64) -> Option<f64> {
        let mut v = t * self.objective.dot(x);
        for b in &self.blocks {
            v -= log_det(&self.shifted(b, x, self.shift))?;
        }
        if let Some((w, b)) = self.log_det {
            if self.slack.is_some() {
                v -= log_det(&self.shifted(b, x, self.shift))?;
            } else {
                v -= t * w * log_det(&b.eval(x))?;
            }
        }
        for (k, lo, hi) in &self.bounds {
            if lo.is_finite() {
                let d = x[*k] - lo;
                if d <= 0.0 {
                    return None;
                }
                v -= d.ln();
            }
            if hi.is_finite() {
                let d = hi - x[*k];
                if d <= 0.0 {
                    return None;
                }
                v -= d.ln();
            }
        }
        Some(v)
    }

    fn accumulate_block(&self, model: &mut Model, m: DMatrix<f64>, b: &LmiBlock, weight: f64, with_slack: bool) -> Option<()> {
        let chol = m.cholesky()?;
        let l = chol.l();
        model.value -= weight * 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let d = l.nrows();
        // G_k = L^-1 A_k L^-T
        let mut gs: Vec<(usize, DMatrix<f64>)> = Vec::with_capacity(b.terms.len() + 1);
        let whiten = |a: &DMatrix<f64>| -> DMatrix<f64> {
            let y = l.solve_lower_triangular(a).expect("nonsingular factor");
            let z = l
                .solve_lower_triangular(&y.transpose())
                .expect("nonsingular factor");
            z.transpose()
        };
        for (k, a) in &b.terms {
            gs.push((*k, whiten(a)));
        }
        if with_slack {
            if let Some(s) = self.slack {
                gs.push((s, whiten(&DMatrix::identity(d, d))));
            }
        }
        for (i, (ki, gi)) in gs.iter().enumerate() {
            model.grad[*ki] -= weight * gi.trace();
            for (kj, gj) in gs.iter().skip(i) {
                let h = weight * gi.component_mul(gj).sum();
                model.hess[(*ki, *kj)] += h;
                if ki != kj {
                    model.hess[(*kj, *ki)] += h;
                }
            }
        }
        Some(())
    }

    fn model(&self, x: &DVector<f64>, t: f64) -> Option<Model> {
        let mut model = Model {
            value: t * self.objective.dot(x),
            grad: &self.objective * t,
            hess: DMatrix::zeros(self.n, self.n),
        };
        for b in &self.blocks {
            let m = self.shifted(b, x, self.shift);
            self.accumulate_block(&mut model, m, b, 1.0, true)?;
        }
        if let Some((w, b)) = self.log_det {
            if self.slack.is_some() {
                let m = self.shifted(b, x, self.shift);
                self.accumulate_block(&mut model, m, b, 1.0, true)?;
            } else {
                self.accumulate_block(&mut model, b.eval(x), b, t * w, false)?;
            }
        }
        for (k, lo, hi) in &self.bounds {
            for (d, sign) in [(x[*k] - lo, 1.0), (hi - x[*k], -1.0)] {
                if d.is_infinite() {
                    continue;
                }
                if d <= 0.0 {
                    return None;
                }
                model.value -= d.ln();
                model.grad[*k] -= sign / d;
                model.hess[(*k, *k)] += 1.0 / (d * d);
            }
        }
        Some(model)
    }

    /// Damped Newton centering. Returns the number of steps, or `None` on
    /// numerical failure. `stop` is polled after every step.
    fn center(
        &self,
        x: &mut DVector<f64>,
        t: f64,
        budget: usize,
        stop: &dyn Fn(&DVector<f64>) -> bool,
    ) -> Option<usize> {
        for step in 0..budget {
            let model = self.model(x, t)?;
            let mut hess = model.hess.clone();
            let scale = hess.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
            let mut reg = 0.0;
            let chol = loop {
                if let Some(c) = hess.clone().cholesky() {
                    break c;
                }
                reg = if reg == 0.0 { 1e-14 * scale } else { reg * 100.0 };
                if reg > 1e-2 * scale {
                    return None;
                }
                hess = model.hess.clone() + DMatrix::identity(self.n, self.n) * reg;
            };
            let dx = -chol.solve(&model.grad);
            let decrement = -model.grad.dot(&dx);
            if !decrement.is_finite() {
                return None;
            }
            if decrement <= 1e-7 {
                return Some(step);
            }
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..80 {
                let cand = &*x + &dx * alpha;
                if self.strictly_feasible(&cand) {
                    if let Some(v) = self.value(&cand, t) {
                        if v <= model.value - 0.25 * alpha * decrement {
                            *x = cand;
                            accepted = true;
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                // No progress possible at machine precision: treat as centered.
                return if decrement < 1e-4 { Some(step) } else { None };
            }
            if stop(x) {
                return Some(step + 1);
            }
        }
        Some(budget)
    }
}

impl BarrierSolver {
    fn failure(program: &ConicProgram, x: DVector<f64>, status: SolveStatus, steps: usize) -> ConicSolution {
        ConicSolution {
            status,
            objective: program.objective_value(&x),
            residual: program.residual(&x),
            x,
            newton_steps: steps,
        }
    }

    fn phase_one(&self, program: &ConicProgram, blocks: &[&LmiBlock]) -> Result<(DVector<f64>, usize), (SolveStatus, usize)> {
        let n = program.num_vars();
        let mut x0 = program
            .initial
            .clone()
            .unwrap_or_else(|| DVector::zeros(n));
        for (i, (lo, hi)) in program.bounds.iter().enumerate() {
            if lo.is_finite() && hi.is_finite() {
                x0[i] = x0[i].clamp(lo + 1e-3 * (hi - lo), hi - 1e-3 * (hi - lo));
            } else if lo.is_finite() && x0[i] <= *lo {
                x0[i] = lo + 1.0;
            } else if hi.is_finite() && x0[i] >= *hi {
                x0[i] = hi - 1.0;
            }
        }
        let margin = program.margin;
        let mut worst: f64 = 0.0;
        for b in blocks {
            worst = worst.max(margin - min_eigenvalue(&b.eval(&x0)));
        }
        if let Some((_, b)) = &program.log_det {
            worst = worst.max(margin - min_eigenvalue(&b.eval(&x0)));
        }
        if worst < 0.0 {
            return Ok((x0, 0));
        }
        let s0 = worst + 1.0;
        let mut x = DVector::zeros(n + 1);
        x.rows_mut(0, n).copy_from(&x0);
        x[n] = s0;
        let mut objective = DVector::zeros(n + 1);
        objective[n] = 1.0;
        let mut bounds: Vec<(usize, f64, f64)> = program
            .bounds
            .iter()
            .enumerate()
            .filter(|(_, (lo, hi))| lo.is_finite() || hi.is_finite())
            .map(|(i, (lo, hi))| (i, *lo, *hi))
            .collect();
        // Keeps phase I bounded below; any s < 0 already certifies feasibility.
        bounds.push((n, -s0.max(1.0), f64::INFINITY));
        let barrier = Barrier {
            blocks: blocks.to_vec(),
            shift: margin,
            slack: Some(n),
            log_det: program.log_det.as_ref().map(|(w, b)| (*w, b)),
            bounds,
            objective,
            n: n + 1,
        };
        let stop = |x: &DVector<f64>| x[n] < 0.0;
        let m = barrier.degree();
        let mut t = 1.0 / s0.max(1e-3);
        let mut steps = 0;
        for _ in 0..self.settings.max_outer {
            let taken = barrier
                .center(&mut x, t, self.settings.max_newton, &stop)
                .ok_or((SolveStatus::NumericalFailure, steps))?;
            steps += taken;
            if x[n] < 0.0 {
                return Ok((x.rows(0, n).into_owned(), steps));
            }
            if m / t < 1e-10 {
                return Err((SolveStatus::Infeasible, steps));
            }
            // Lower bound on the optimal slack is already positive.
            if x[n] - m / t > 1e-10 {
                return Err((SolveStatus::Infeasible, steps));
            }
            t *= self.settings.mu;
        }
        Err((SolveStatus::Infeasible, steps))
    }
}

impl ConicBackend for BarrierSolver {
    fn solve(&mut self, program: &ConicProgram) -> ConicSolution {
        let n = program.num_vars();
        let blocks: Vec<&LmiBlock> = program.blocks.iter().filter(|b| !b.is_constant()).collect();
        // Constant blocks are checked once, without the strict margin.
        for b in program.blocks.iter().filter(|b| b.is_constant()) {
            let scale = b.constant.norm().max(1.0);
            if min_eigenvalue(&b.constant) < -1e-9 * scale {
                return Self::failure(program, DVector::zeros(n), SolveStatus::Infeasible, 0);
            }
        }
        let (mut x, mut steps) = match self.phase_one(program, &blocks) {
            Ok(v) => v,
            Err((status, steps)) => {
                return Self::failure(program, DVector::zeros(n), status, steps)
            }
        };
        let barrier = Barrier {
            blocks,
            shift: program.margin,
            slack: None,
            log_det: program.log_det.as_ref().map(|(w, b)| (*w, b)),
            bounds: program
                .bounds
                .iter()
                .enumerate()
                .filter(|(_, (lo, hi))| lo.is_finite() || hi.is_finite())
                .map(|(i, (lo, hi))| (i, *lo, *hi))
                .collect(),
            objective: program.objective.clone(),
            n,
        };
        let m = barrier.degree();
        let never = |_: &DVector<f64>| false;
        let mut t = 1.0;
        for _ in 0..self.settings.max_outer {
            match barrier.center(&mut x, t, self.settings.max_newton, &never) {
                Some(taken) => steps += taken,
                None => return Self::failure(program, x, SolveStatus::NumericalFailure, steps),
            }
            let obj = program.objective_value(&x);
            if m / t <= self.settings.gap_tol * obj.abs().max(1.0) {
                return ConicSolution {
                    status: SolveStatus::Optimal,
                    objective: obj,
                    residual: program.residual(&x),
                    x,
                    newton_steps: steps,
                };
            }
            t *= self.settings.mu;
        }
        Self::failure(program, x, SolveStatus::NumericalFailure, steps)
    }
}
