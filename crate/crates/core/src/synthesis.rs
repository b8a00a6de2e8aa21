//! Local controller synthesis: the LMI program that co-designs a cell
//! `E(c, P)` and an affine law `u = K (x - c) + l` driving the whole cell
//! into a target ellipsoid for every admissible disturbance, despite the
//! linearization error of the nonlinear dynamics.
//!
//! Decision variables follow the congruence-transformed formulation where
//! the cell enters through `L = P^{-1/2}` and the gain through `F = K L`,
//! which keeps every constraint linear in the unknowns:
//!
//! * state bound: `[I, L; L, dX I] ⪰ 0`
//! * input bound: `[phi I, 0, F'; 0, dU - phi, (l - u_bar)'; F, l - u_bar, I] ⪰ 0`
//! * transition, per error-box vertex `V_i` and disturbance vertex `w_j`:
//!   `[b I, 0, (A L + B F)'; 0, 1 - b, (mu + V_i + E w_j)'; A L + B F, mu + V_i + E w_j, P+^-1] ⪰ 0`
//!   with `mu = g + A c + B l - c+` and `V_i = ±L_d (dX + dU + dW) / 2`
//! * input feasibility, per `U_k`: `[t I, 0, F' U_k'; 0, 1 - t, l' U_k'; U_k F, U_k l, I] ⪰ 0`
//! * stage cost: `[g I, 0, [L F' 0] S'; 0, J - g, [c' l' 1] S'; S [L; F; 0], S [c; l; 1], I] ⪰ 0`
//!
//! The objective is `lambda J - (1 - lambda) log det L`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)]
use num_traits::Float;
use thiserror::Error;

use crate::conic::{ConicBackend, ConicProgram, LmiBlock, SolveStatus};
use crate::dynamics::{
    nominal_linearization_point, AffineModel, DynamicsError, LipschitzVector, PolynomialSystem,
};
use crate::geometry::{max_sq_dist_to_point, Ellipsoid, GeometryError, InputSet, VPolytope};
use crate::tolerance::Tolerances;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthesisError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("state dimension {0} exceeds the configured maximum {1}")]
    TooManyStates(usize, usize),
    #[error("trade-off weight {0} is outside [0, 1]")]
    InvalidLambda(f64),
    #[error("stage cost matrix is not symmetric positive definite")]
    CostNotPositiveDefinite,
    #[error("fixed cell is not centered at the linearization center")]
    FixedShapeOffCenter,
    #[error("local problem is infeasible")]
    Infeasible,
    #[error("conic solver failed numerically")]
    NumericalFailure,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), SynthesisError> {
    if expected == got {
        Ok(())
    } else {
        Err(SynthesisError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

/// `J(x, u) = [x; u; 1]' Q [x; u; 1]` with a factor `Q = S' S`.
#[derive(Debug, Clone, PartialEq)]
pub struct StageCost {
    q: DMatrix<f64>,
    s: DMatrix<f64>,
}

impl StageCost {
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn factor(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let mut z = DVector::zeros(x.len() + u.len() + 1);
        z.rows_mut(0, x.len()).copy_from(x);
        z.rows_mut(x.len(), u.len()).copy_from(u);
        z[x.len() + u.len()] = 1.0;
        z.dot(&(&self.q * &z))
    }
}

/// Symmetric square root of `Q`, so that `S' S = Q`.
pub fn factor_stage_cost(q: &DMatrix<f64>) -> Result<StageCost, SynthesisError> {
    if q.nrows() != q.ncols() || q.iter().any(|v| !v.is_finite()) {
        return Err(SynthesisError::CostNotPositiveDefinite);
    }
    let norm = q.norm();
    if (q - q.transpose()).norm() > Tolerances::default().symmetry * norm.max(1e-300) {
        return Err(SynthesisError::CostNotPositiveDefinite);
    }
    let q = (q + q.transpose()) * 0.5;
    let eig = SymmetricEigen::new(q.clone());
    if eig.eigenvalues.iter().any(|l| *l <= 0.0) {
        return Err(SynthesisError::CostNotPositiveDefinite);
    }
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.sqrt()));
    let s = &eig.eigenvectors * root * eig.eigenvectors.transpose();
    let s = (&s + s.transpose()) * 0.5;
    Ok(StageCost { q, s })
}

/// Everything `solveLocalProblem` needs for one candidate transition.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalProblem {
    pub center: DVector<f64>,
    pub target: Ellipsoid,
    /// Linearization at `(center, u_bar, 0)`.
    pub model: AffineModel,
    pub lipschitz: LipschitzVector,
    pub inputs: InputSet,
    pub disturbances: VPolytope,
    pub cost: StageCost,
    pub lambda: f64,
}

/// Problem data shared by every local problem of one system: the dynamics,
/// their global Lipschitz vector, the constraint sets and the stage cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionContext {
    pub system: PolynomialSystem,
    pub lipschitz: LipschitzVector,
    pub inputs: InputSet,
    pub disturbances: VPolytope,
    pub cost: StageCost,
    /// Input linearization anchor; zero when `None`.
    pub anchor: Option<DVector<f64>>,
}

impl TransitionContext {
    pub fn new(
        system: PolynomialSystem,
        inputs: InputSet,
        disturbances: VPolytope,
        cost: StageCost,
        anchor: Option<DVector<f64>>,
    ) -> Result<Self, SynthesisError> {
        check("inputs", system.n_u(), inputs.dim())?;
        check("disturbances", system.n_w(), disturbances.dim())?;
        check("cost", system.n_x() + system.n_u() + 1, cost.q.nrows())?;
        let lipschitz = system.lipschitz_bound()?;
        Ok(Self {
            system,
            lipschitz,
            inputs,
            disturbances,
            cost,
            anchor,
        })
    }

    /// Linearizes at `(center, u_bar, 0)` and packages a local problem.
    pub fn local_problem(
        &self,
        center: &DVector<f64>,
        target: &Ellipsoid,
        lambda: f64,
    ) -> Result<LocalProblem, SynthesisError> {
        check("center", self.system.n_x(), center.len())?;
        let probe = Ellipsoid::ball(center.clone(), 1.0)?;
        let point =
            nominal_linearization_point(&probe, &self.inputs, &self.disturbances, self.anchor.as_ref())?;
        let model = self.system.linearize(&point)?;
        Ok(LocalProblem {
            center: center.clone(),
            target: target.clone(),
            model,
            lipschitz: self.lipschitz.clone(),
            inputs: self.inputs.clone(),
            disturbances: self.disturbances.clone(),
            cost: self.cost.clone(),
            lambda,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisConfig {
    /// Guard against the `2^n` error-box vertex blow-up.
    pub max_state_dim: usize,
    /// Box `|x_i| <= bound` on every decision variable.
    pub variable_bound: f64,
    pub tolerances: Tolerances,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            max_state_dim: 12,
            variable_bound: 1e6,
            tolerances: Tolerances::default(),
        }
    }
}

/// Affine feedback `u = K (x - c) + l`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineController {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub center: DVector<f64>,
}

impl AffineController {
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.gain * (x - &self.center) + &self.offset
    }
}

/// One synthesized transition.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalSolution {
    pub cell: Ellipsoid,
    pub controller: AffineController,
    /// Worst-case stage cost bound over the cell.
    pub j_bound: f64,
    pub delta_x: f64,
    pub delta_u: f64,
    /// `lambda J - (1 - lambda) log det L` at the solution.
    pub objective: f64,
}

impl LocalSolution {
    pub fn shape(&self) -> &DMatrix<f64> {
        self.cell.shape()
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.controller.gain
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.controller.offset
    }
}

/// Controller found by [`new_transition`] for a fixed source cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionController {
    pub controller: AffineController,
    pub j_bound: f64,
    pub delta_u: f64,
}

/// Scalar affine expression `c + sum a_k x_k`.
#[derive(Debug, Clone, Default, PartialEq)]
struct Aff {
    c: f64,
    terms: Vec<(usize, f64)>,
}

impl Aff {
    fn constant(c: f64) -> Self {
        Self {
            c,
            terms: Vec::new(),
        }
    }

    fn var(k: usize) -> Self {
        Self {
            c: 0.0,
            terms: vec![(k, 1.0)],
        }
    }

    fn add(&self, o: &Aff) -> Aff {
        let mut out = self.clone();
        out.c += o.c;
        for (k, a) in &o.terms {
            match out.terms.iter_mut().find(|(j, _)| j == k) {
                Some((_, b)) => *b += a,
                None => out.terms.push((*k, *a)),
            }
        }
        out
    }

    fn scale(&self, s: f64) -> Aff {
        Aff {
            c: self.c * s,
            terms: self.terms.iter().map(|(k, a)| (*k, a * s)).collect(),
        }
    }

    fn sub(&self, o: &Aff) -> Aff {
        self.add(&o.scale(-1.0))
    }
}

/// Dense matrix of affine expressions (row-major).
#[derive(Debug, Clone, PartialEq)]
struct AffMat {
    rows: usize,
    cols: usize,
    data: Vec<Aff>,
}

impl AffMat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Aff::default(); rows * cols],
        }
    }

    fn constant(m: &DMatrix<f64>) -> Self {
        let mut out = Self::zeros(m.nrows(), m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.data[r * m.ncols() + c] = Aff::constant(m[(r, c)]);
            }
        }
        out
    }

    fn column(v: &[Aff]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    fn at(&self, r: usize, c: usize) -> &Aff {
        &self.data[r * self.cols + c]
    }

    fn set(&mut self, r: usize, c: usize, v: Aff) {
        self.data[r * self.cols + c] = v;
    }

    fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.at(r, c).clone());
            }
        }
        out
    }

    /// `m * self`.
    fn premul(&self, m: &DMatrix<f64>) -> Self {
        assert_eq!(m.ncols(), self.rows);
        let mut out = Self::zeros(m.nrows(), self.cols);
        for r in 0..m.nrows() {
            for c in 0..self.cols {
                let mut acc = Aff::default();
                for k in 0..self.rows {
                    let a = m[(r, k)];
                    if a != 0.0 {
                        acc = acc.add(&self.at(k, c).scale(a));
                    }
                }
                out.set(r, c, acc);
            }
        }
        out
    }

    fn add(&self, o: &AffMat) -> Self {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&o.data).map(|(a, b)| a.add(b)).collect(),
        }
    }

    fn vstack(parts: &[&AffMat]) -> Self {
        let cols = parts[0].cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            assert_eq!(p.cols, cols);
            rows += p.rows;
            data.extend(p.data.iter().cloned());
        }
        Self { rows, cols, data }
    }

    fn paste(&mut self, r0: usize, c0: usize, m: &AffMat) {
        for r in 0..m.rows {
            for c in 0..m.cols {
                self.set(r0 + r, c0 + c, m.at(r, c).clone());
            }
        }
    }

    fn into_block(self, label: String) -> LmiBlock {
        let n = self.rows;
        let constant = DMatrix::from_fn(n, self.cols, |r, c| self.at(r, c).c);
        let mut terms: Vec<(usize, DMatrix<f64>)> = Vec::new();
        for r in 0..n {
            for c in 0..self.cols {
                for (k, a) in &self.at(r, c).terms {
                    if *a == 0.0 {
                        continue;
                    }
                    let slot = match terms.iter().position(|(j, _)| j == k) {
                        Some(p) => p,
                        None => {
                            terms.push((*k, DMatrix::zeros(n, self.cols)));
                            terms.len() - 1
                        }
                    };
                    terms[slot].1[(r, c)] += a;
                }
            }
        }
        terms.sort_by_key(|(k, _)| *k);
        LmiBlock {
            label,
            constant,
            terms,
        }
    }
}

/// `[s1 I_n, 0, X'; 0, s2, y'; X, y, Z]`, the common shape of the
/// S-procedure blocks after the congruence transformation.
fn schur_block(n: usize, s1: &Aff, s2: &Aff, x: &AffMat, y: &AffMat, z: &DMatrix<f64>) -> AffMat {
    let p = z.nrows();
    assert_eq!((x.rows, x.cols), (p, n));
    assert_eq!((y.rows, y.cols), (p, 1));
    let dim = n + 1 + p;
    let mut m = AffMat::zeros(dim, dim);
    for i in 0..n {
        m.set(i, i, s1.clone());
    }
    m.set(n, n, s2.clone());
    m.paste(n + 1, 0, x);
    m.paste(0, n + 1, &x.transpose());
    m.paste(n + 1, n, y);
    m.paste(n, n + 1, &y.transpose());
    m.paste(n + 1, n + 1, &AffMat::constant(z));
    m
}

/// Index bookkeeping for the decision vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableLayout {
    /// `L` entries (upper triangle), `None` when the cell is fixed.
    pub l_var: Option<Vec<(usize, usize, usize)>>,
    pub f: Vec<Vec<usize>>,
    pub offset: Vec<usize>,
    pub delta_x: Option<usize>,
    pub delta_u: usize,
    pub phi: usize,
    pub beta: Vec<Vec<usize>>,
    pub tau: Vec<usize>,
    pub gamma: usize,
    pub j_bound: usize,
}

/// Number of LMI blocks per family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockCounts {
    pub state_bound: usize,
    pub input_bound: usize,
    pub transition: usize,
    pub input_feasibility: usize,
    pub cost: usize,
}

/// A program ready for a [`ConicBackend`], with the information needed to
/// read a solution back.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledProgram {
    pub program: ConicProgram,
    pub layout: VariableLayout,
    pub counts: BlockCounts,
    /// Fixed `L` when the cell shape is pinned.
    fixed_l: Option<DMatrix<f64>>,
    fixed_delta_x: Option<f64>,
    lambda: f64,
    center: DVector<f64>,
}

/// Distinct sign patterns of the error-box vertices: coordinates with a
/// zero Lipschitz constant contribute no spread and are not enumerated.
fn error_box_signs(l: &LipschitzVector) -> Vec<Vec<f64>> {
    let n = l.0.len();
    let active: Vec<usize> = (0..n).filter(|i| l.0[*i] > 0.0).collect();
    (0..1usize << active.len())
        .map(|k| {
            let mut s = vec![0.0; n];
            for (bit, &i) in active.iter().enumerate() {
                s[i] = if (k >> bit) & 1 == 1 { 1.0 } else { -1.0 };
            }
            s
        })
        .collect()
}

fn validate(p: &LocalProblem, cfg: &SynthesisConfig) -> Result<(), SynthesisError> {
    let n = p.center.len();
    let m = p.inputs.dim();
    if n > cfg.max_state_dim {
        return Err(SynthesisError::TooManyStates(n, cfg.max_state_dim));
    }
    if !(0.0..=1.0).contains(&p.lambda) {
        return Err(SynthesisError::InvalidLambda(p.lambda));
    }
    check("target", n, p.target.dim())?;
    check("A", n, p.model.a.nrows())?;
    check("A", n, p.model.a.ncols())?;
    check("B", n, p.model.b.nrows())?;
    check("B", m, p.model.b.ncols())?;
    check("E", n, p.model.e.nrows())?;
    check("E", p.disturbances.dim(), p.model.e.ncols())?;
    check("Lipschitz vector", n, p.lipschitz.0.len())?;
    check("input anchor", m, p.model.point.u.len())?;
    check("cost", n + m + 1, p.cost.q.nrows())?;
    Ok(())
}

/// Builds the conic program for one local problem. With `fix_shape`, the
/// cell is pinned (`L = P^{-1/2}`, `dX = 1 / lambda_min(P)`) and only the
/// controller and scalar multipliers remain free; the objective becomes
/// the cost bound alone.
pub fn assemble_lmis(
    p: &LocalProblem,
    fix_shape: Option<&Ellipsoid>,
    cfg: &SynthesisConfig,
) -> Result<AssembledProgram, SynthesisError> {
    validate(p, cfg)?;
    let n = p.center.len();
    let m = p.inputs.dim();
    let c = &p.center;
    if let Some(fixed) = fix_shape {
        check("fixed cell", n, fixed.dim())?;
        let scale = c.norm().max(1.0);
        if (fixed.center() - c).norm() > 1e-9 * scale {
            return Err(SynthesisError::FixedShapeOffCenter);
        }
    }
    let u_bar = &p.model.point.u;
    let delta_w = max_sq_dist_to_point(&p.disturbances, &DVector::zeros(p.disturbances.dim()))?;

    let mut names: Vec<String> = Vec::new();
    let mut new_var = |name: String| -> usize {
        names.push(name);
        names.len() - 1
    };

    // L (symmetric) or its fixed value.
    let mut l_mat = AffMat::zeros(n, n);
    let (l_var, fixed_l, fixed_dx) = match fix_shape {
        None => {
            let mut idx = Vec::new();
            for i in 0..n {
                for j in i..n {
                    let k = new_var(format!("L[{i},{j}]"));
                    idx.push((i, j, k));
                    l_mat.set(i, j, Aff::var(k));
                    l_mat.set(j, i, Aff::var(k));
                }
            }
            (Some(idx), None, None)
        }
        Some(cell) => {
            let l = cell.inv_sqrt_shape();
            l_mat = AffMat::constant(&l);
            (None, Some(l), Some(1.0 / cell.min_eigenvalue()))
        }
    };
    let mut f_idx = vec![vec![0; n]; m];
    let mut f_mat = AffMat::zeros(m, n);
    for (r, row) in f_idx.iter_mut().enumerate() {
        for (col, slot) in row.iter_mut().enumerate() {
            *slot = new_var(format!("F[{r},{col}]"));
            f_mat.set(r, col, Aff::var(*slot));
        }
    }
    let offset: Vec<usize> = (0..m).map(|r| new_var(format!("l[{r}]"))).collect();
    let l_vec: Vec<Aff> = offset.iter().map(|k| Aff::var(*k)).collect();
    let delta_x = match fixed_dx {
        None => Some(new_var("delta_x".into())),
        Some(_) => None,
    };
    let dx = match (delta_x, fixed_dx) {
        (Some(k), _) => Aff::var(k),
        (None, Some(v)) => Aff::constant(v),
        _ => unreachable!(),
    };
    let delta_u = new_var("delta_u".into());
    let du = Aff::var(delta_u);
    let phi = new_var("phi".into());

    let signs = error_box_signs(&p.lipschitz);
    let nw = p.disturbances.vertices().len();
    let mut beta = Vec::with_capacity(signs.len());
    for i in 0..signs.len() {
        beta.push((0..nw).map(|j| new_var(format!("beta[{i},{j}]"))).collect::<Vec<_>>());
    }
    let tau: Vec<usize> = (0..p.inputs.constraints().len())
        .map(|k| new_var(format!("tau[{k}]")))
        .collect();
    let gamma = new_var("gamma".into());
    let j_bound = new_var("J".into());
    let nvars = names.len();

    let one = Aff::constant(1.0);
    let mut blocks = Vec::new();

    // State bound.
    {
        let mut s = AffMat::zeros(2 * n, 2 * n);
        for i in 0..n {
            s.set(i, i, one.clone());
            s.set(n + i, n + i, dx.clone());
        }
        s.paste(0, n, &l_mat);
        s.paste(n, 0, &l_mat);
        blocks.push(s.into_block("state_bound".into()));
    }

    // Input bound.
    let l_minus_ubar: Vec<Aff> = (0..m).map(|r| l_vec[r].sub(&Aff::constant(u_bar[r]))).collect();
    blocks.push(
        schur_block(
            n,
            &Aff::var(phi),
            &du.sub(&Aff::var(phi)),
            &f_mat,
            &AffMat::column(&l_minus_ubar),
            &DMatrix::identity(m, m),
        )
        .into_block("input_bound".into()),
    );

    // Transition blocks.
    let model = &p.model;
    let closed = l_mat.premul(&model.a).add(&f_mat.premul(&model.b));
    let target_inv = p
        .target
        .shape()
        .clone()
        .cholesky()
        .ok_or(GeometryError::NotPositiveDefinite)?
        .inverse();
    let target_inv = (&target_inv + target_inv.transpose()) * 0.5;
    let mu_const = &model.g + &model.a * c - p.target.center();
    let b_l = AffMat::column(&l_vec).premul(&model.b);
    let radius_sq = dx.add(&du).add(&Aff::constant(delta_w));
    for (i, sign) in signs.iter().enumerate() {
        for (j, w) in p.disturbances.vertices().iter().enumerate() {
            let ew = &model.e * w;
            let y: Vec<Aff> = (0..n)
                .map(|r| {
                    let half = 0.5 * p.lipschitz.0[r] * sign[r];
                    Aff::constant(mu_const[r] + ew[r])
                        .add(b_l.at(r, 0))
                        .add(&radius_sq.scale(half))
                })
                .collect();
            let b = Aff::var(beta[i][j]);
            blocks.push(
                schur_block(n, &b, &one.sub(&b), &closed, &AffMat::column(&y), &target_inv)
                    .into_block(format!("transition[{i},{j}]")),
            );
        }
    }

    // Input feasibility.
    for (k, uk) in p.inputs.constraints().iter().enumerate() {
        let t = Aff::var(tau[k]);
        blocks.push(
            schur_block(
                n,
                &t,
                &one.sub(&t),
                &f_mat.premul(uk),
                &AffMat::column(&l_vec).premul(uk),
                &DMatrix::identity(uk.nrows(), uk.nrows()),
            )
            .into_block(format!("input_feasibility[{k}]")),
        );
    }

    // Stage cost.
    {
        let big = n + m + 1;
        let stacked = AffMat::vstack(&[&l_mat, &f_mat, &AffMat::zeros(1, n)]);
        let mut top: Vec<Aff> = c.iter().map(|v| Aff::constant(*v)).collect();
        top.extend(l_vec.iter().cloned());
        top.push(one.clone());
        let s = p.cost.factor();
        let g = Aff::var(gamma);
        blocks.push(
            schur_block(
                n,
                &g,
                &Aff::var(j_bound).sub(&g),
                &stacked.premul(s),
                &AffMat::column(&top).premul(s),
                &DMatrix::identity(big, big),
            )
            .into_block("stage_cost".into()),
        );
    }

    let lambda = if fix_shape.is_some() { 1.0 } else { p.lambda };
    let mut objective = DVector::zeros(nvars);
    objective[j_bound] = lambda;
    let log_det = match (&l_var, lambda < 1.0) {
        (Some(_), true) => Some((1.0 - lambda, l_mat.clone().into_block("L".into()))),
        _ => None,
    };

    // Initial guess: a small ball, zero gain and input at the anchor.
    let mut initial = DVector::zeros(nvars);
    let r0 = 0.05 * p.target.semi_axes()[0];
    if let Some(idx) = &l_var {
        for (i, j, k) in idx {
            if i == j {
                initial[*k] = r0;
            }
        }
    }
    for (r, k) in offset.iter().enumerate() {
        initial[*k] = u_bar[r];
    }
    if let Some(k) = delta_x {
        initial[k] = 2.0 * r0 * r0;
    }
    initial[delta_u] = 1.0;
    initial[phi] = 0.5;
    for k in beta.iter().flatten().chain(tau.iter()) {
        initial[*k] = 0.5;
    }
    initial[gamma] = 0.5;
    initial[j_bound] = 1.0 + p.cost.eval(c, u_bar) * 4.0;

    let counts = BlockCounts {
        state_bound: 1,
        input_bound: 1,
        transition: signs.len() * nw,
        input_feasibility: tau.len(),
        cost: 1,
    };
    let bound = cfg.variable_bound;
    Ok(AssembledProgram {
        program: ConicProgram {
            var_names: names,
            objective,
            log_det,
            blocks,
            bounds: vec![(-bound, bound); nvars],
            margin: cfg.tolerances.lmi_margin,
            initial: Some(initial),
        },
        layout: VariableLayout {
            l_var,
            f: f_idx,
            offset,
            delta_x,
            delta_u,
            phi,
            beta,
            tau,
            gamma,
            j_bound,
        },
        counts,
        fixed_l,
        fixed_delta_x: fixed_dx,
        lambda,
        center: c.clone(),
    })
}

struct Extracted {
    l: DMatrix<f64>,
    controller: AffineController,
    j_bound: f64,
    delta_x: f64,
    delta_u: f64,
}

impl AssembledProgram {
    fn extract(&self, x: &DVector<f64>) -> Result<Extracted, SynthesisError> {
        let lay = &self.layout;
        let l = match (&lay.l_var, &self.fixed_l) {
            (Some(idx), _) => {
                let n = self.center.len();
                let mut l = DMatrix::zeros(n, n);
                for (i, j, k) in idx {
                    l[(*i, *j)] = x[*k];
                    l[(*j, *i)] = x[*k];
                }
                l
            }
            (None, Some(l)) => l.clone(),
            _ => unreachable!(),
        };
        let f = DMatrix::from_fn(lay.f.len(), self.center.len(), |r, c| x[lay.f[r][c]]);
        let l_inv = l
            .clone()
            .cholesky()
            .ok_or(SynthesisError::NumericalFailure)?
            .inverse();
        let gain = f * &l_inv;
        let offset = DVector::from_iterator(lay.offset.len(), lay.offset.iter().map(|k| x[*k]));
        Ok(Extracted {
            controller: AffineController {
                gain,
                offset,
                center: self.center.clone(),
            },
            j_bound: x[lay.j_bound],
            delta_x: lay.delta_x.map(|k| x[k]).or(self.fixed_delta_x).unwrap_or(0.0),
            delta_u: x[lay.delta_u],
            l,
        })
    }
}

fn run<B: ConicBackend + ?Sized>(
    assembled: &AssembledProgram,
    backend: &mut B,
) -> Result<DVector<f64>, SynthesisError> {
    let sol = backend.solve(&assembled.program);
    match sol.status {
        SolveStatus::Optimal if sol.residual <= 1e-7 => Ok(sol.x),
        SolveStatus::Optimal | SolveStatus::NumericalFailure => Err(SynthesisError::NumericalFailure),
        SolveStatus::Infeasible => Err(SynthesisError::Infeasible),
    }
}

/// Solves one local problem; the returned cell, controller and cost bound
/// satisfy the transition, input and cost guarantees for the true dynamics
/// on the declared domain. A numerical failure is retried once from the
/// centre of the variable box before being reported as infeasible.
pub fn solve_local_problem<B: ConicBackend + ?Sized>(
    p: &LocalProblem,
    backend: &mut B,
    cfg: &SynthesisConfig,
) -> Result<LocalSolution, SynthesisError> {
    let mut assembled = assemble_lmis(p, None, cfg)?;
    let x = match run(&assembled, backend) {
        Err(SynthesisError::NumericalFailure) => {
            assembled.program.initial = None;
            match run(&assembled, backend) {
                Err(SynthesisError::NumericalFailure) => return Err(SynthesisError::Infeasible),
                other => other?,
            }
        }
        other => other?,
    };
    let ex = assembled.extract(&x)?;
    let l_inv = ex
        .l
        .clone()
        .cholesky()
        .ok_or(SynthesisError::NumericalFailure)?
        .inverse();
    let shape = &l_inv * &l_inv;
    let shape = (&shape + shape.transpose()) * 0.5;
    let cell = Ellipsoid::new(p.center.clone(), shape).map_err(|_| SynthesisError::NumericalFailure)?;
    let log_det_l = 2.0
        * ex
            .l
            .clone()
            .cholesky()
            .ok_or(SynthesisError::NumericalFailure)?
            .l()
            .diagonal()
            .iter()
            .map(|d| d.ln())
            .sum::<f64>();
    Ok(LocalSolution {
        cell,
        controller: ex.controller,
        objective: assembled.lambda * ex.j_bound - (1.0 - assembled.lambda) * log_det_l,
        j_bound: ex.j_bound,
        delta_x: ex.delta_x,
        delta_u: ex.delta_u,
    })
}

/// Controller-only synthesis from a fixed `source` cell into `p.target`,
/// minimizing the cost bound. `p.model` must be linearized at the source
/// center.
pub fn new_transition<B: ConicBackend + ?Sized>(
    source: &Ellipsoid,
    p: &LocalProblem,
    backend: &mut B,
    cfg: &SynthesisConfig,
) -> Result<TransitionController, SynthesisError> {
    let mut assembled = assemble_lmis(p, Some(source), cfg)?;
    let x = match run(&assembled, backend) {
        Err(SynthesisError::NumericalFailure) => {
            assembled.program.initial = None;
            match run(&assembled, backend) {
                Err(SynthesisError::NumericalFailure) => return Err(SynthesisError::Infeasible),
                other => other?,
            }
        }
        other => other?,
    };
    let ex = assembled.extract(&x)?;
    Ok(TransitionController {
        controller: ex.controller,
        j_bound: ex.j_bound,
        delta_u: ex.delta_u,
    })
}
