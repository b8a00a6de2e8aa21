//! Polynomial dynamics `x+ = f(x, u, w)` with exact symbolic Jacobians,
//! affine linearization and interval bounds on the Hessians.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_traits::Float;
use thiserror::Error;

use crate::geometry::{Ellipsoid, GeometryError, Hyperrectangle, InputSet, VPolytope};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite coefficient in component {0}")]
    NonFinite(usize),
    #[error("Lipschitz bound requires a bounded domain for curved dynamics")]
    UnboundedDomain,
    #[error("input anchor is outside the admissible input set")]
    AnchorOutsideInputSet,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), DynamicsError> {
    if expected == got {
        Ok(())
    } else {
        Err(DynamicsError::DimensionMismatch {
            what,
            expected,
            got,
        })
    }
}

impl core::ops::Add for Interval {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.lo + o.lo, self.hi + o.hi)
    }
}

impl core::ops::Mul for Interval {
    type Output = Self;

    fn mul(self, o: Self) -> Self {
        let p = [self.lo * o.lo, self.lo * o.hi, self.hi * o.lo, self.hi * o.hi];
        Self::new(
            p.iter().copied().fold(f64::INFINITY, f64::min),
            p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

/// Closed real interval used for certified range bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi);
        Self { lo, hi }
    }

    pub fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    pub fn magnitude(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    pub fn scale(self, c: f64) -> Self {
        if c >= 0.0 {
            Self::new(c * self.lo, c * self.hi)
        } else {
            Self::new(c * self.hi, c * self.lo)
        }
    }

    pub fn powi(self, k: u32) -> Self {
        if k == 0 {
            return Self::point(1.0);
        }
        let (a, b) = (Float::powi(self.lo, k as i32), Float::powi(self.hi, k as i32));
        if k % 2 == 1 || self.lo >= 0.0 {
            Self::new(a, b)
        } else if self.hi <= 0.0 {
            Self::new(b, a)
        } else {
            Self::new(0.0, a.max(b))
        }
    }
}

/// `coeff * prod_j z_j^exponents[j]` over the joint variable `z = (x, u, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coeff: f64,
    pub exponents: Vec<u32>,
}

impl Monomial {
    /// Builds a term from separate state, input and disturbance exponents.
    pub fn new(coeff: f64, x_exp: &[u32], u_exp: &[u32], w_exp: &[u32]) -> Self {
        let mut exponents = Vec::with_capacity(x_exp.len() + u_exp.len() + w_exp.len());
        exponents.extend_from_slice(x_exp);
        exponents.extend_from_slice(u_exp);
        exponents.extend_from_slice(w_exp);
        Self { coeff, exponents }
    }

    fn eval(&self, z: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(z)
            .fold(self.coeff, |acc, (k, v)| if *k == 0 { acc } else { acc * Float::powi(*v, *k as i32) })
    }
}

/// Sparse multivariate polynomial with real coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: Vec<Monomial>,
}

impl Polynomial {
    /// Merges duplicate exponent tuples and drops zero coefficients.
    pub fn new(nvars: usize, terms: Vec<Monomial>) -> Result<Self, DynamicsError> {
        let mut merged: Vec<Monomial> = Vec::with_capacity(terms.len());
        for t in terms {
            check("monomial exponents", nvars, t.exponents.len())?;
            match merged.iter_mut().find(|m| m.exponents == t.exponents) {
                Some(m) => m.coeff += t.coeff,
                None => merged.push(t),
            }
        }
        merged.retain(|m| m.coeff != 0.0);
        Ok(Self {
            nvars,
            terms: merged,
        })
    }

    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: Vec::new(),
        }
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> &[Monomial] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| t.exponents.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(z)).sum()
    }

    /// Exact partial derivative with respect to variable `var`.
    pub fn derivative(&self, var: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|t| t.exponents[var] > 0)
            .map(|t| {
                let mut exponents = t.exponents.clone();
                let k = exponents[var];
                exponents[var] = k - 1;
                Monomial {
                    coeff: t.coeff * k as f64,
                    exponents,
                }
            })
            .collect();
        // Distinct inputs stay distinct after differentiation.
        Self {
            nvars: self.nvars,
            terms,
        }
    }

    /// Natural interval extension, term by term.
    pub fn eval_interval(&self, z: &[Interval]) -> Interval {
        self.terms.iter().fold(Interval::point(0.0), |acc, t| {
            let range = t
                .exponents
                .iter()
                .zip(z)
                .filter(|(k, _)| **k > 0)
                .fold(Interval::point(1.0), |r, (k, iv)| r * iv.powi(*k));
            acc + range.scale(t.coeff)
        })
    }
}

/// Linearization point `(x_bar, u_bar, w_bar)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearizationPoint {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub w: DVector<f64>,
}

/// `f~(x, u, w) = A x + B u + E w + g`, exact at the linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub e: DMatrix<f64>,
    pub g: DVector<f64>,
    pub point: LinearizationPoint,
}

impl AffineModel {
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.e * w + &self.g
    }
}

/// Per-component Lipschitz constants of the gradients of `f_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzVector(pub DVector<f64>);

impl LipschitzVector {
    pub fn zeros(n: usize) -> Self {
        Self(DVector::zeros(n))
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }
}

/// Polynomial system `x+ = f(x, u, w)`; variables are ordered `(x, u, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialSystem {
    n_x: usize,
    n_u: usize,
    n_w: usize,
    components: Vec<Polynomial>,
    jacobian: Vec<Vec<Polynomial>>,
    domain: Option<Hyperrectangle>,
}

impl PolynomialSystem {
    pub fn new(
        n_x: usize,
        n_u: usize,
        n_w: usize,
        components: Vec<Polynomial>,
        domain: Option<Hyperrectangle>,
    ) -> Result<Self, DynamicsError> {
        let nvars = n_x + n_u + n_w;
        check("component count", n_x, components.len())?;
        for (i, c) in components.iter().enumerate() {
            check("component variables", nvars, c.nvars())?;
            if c.terms().iter().any(|t| !t.coeff.is_finite()) {
                return Err(DynamicsError::NonFinite(i));
            }
        }
        if let Some(d) = &domain {
            check("domain", nvars, d.dim())?;
        }
        let jacobian = components
            .iter()
            .map(|c| (0..nvars).map(|j| c.derivative(j)).collect())
            .collect();
        Ok(Self {
            n_x,
            n_u,
            n_w,
            components,
            jacobian,
            domain,
        })
    }

    /// `x+ = A x + B u + E w`, optionally over a domain box.
    pub fn linear(
        a: &DMatrix<f64>,
        b: &DMatrix<f64>,
        e: &DMatrix<f64>,
        domain: Option<Hyperrectangle>,
    ) -> Result<Self, DynamicsError> {
        let n_x = a.nrows();
        let (n_u, n_w) = (b.ncols(), e.ncols());
        check("A columns", n_x, a.ncols())?;
        check("B rows", n_x, b.nrows())?;
        check("E rows", n_x, e.nrows())?;
        let nvars = n_x + n_u + n_w;
        let components = (0..n_x)
            .map(|i| {
                let mut terms = Vec::new();
                for (offset, m) in [(0, a), (n_x, b), (n_x + n_u, e)] {
                    for j in 0..m.ncols() {
                        let mut exponents = vec![0; nvars];
                        exponents[offset + j] = 1;
                        terms.push(Monomial {
                            coeff: m[(i, j)],
                            exponents,
                        });
                    }
                }
                Polynomial::new(nvars, terms)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(n_x, n_u, n_w, components, domain)
    }

    pub fn n_x(&self) -> usize {
        self.n_x
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_w(&self) -> usize {
        self.n_w
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.components
    }

    pub fn domain(&self) -> Option<&Hyperrectangle> {
        self.domain.as_ref()
    }

    fn joint(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<Vec<f64>, DynamicsError> {
        check("state", self.n_x, x.len())?;
        check("input", self.n_u, u.len())?;
        check("disturbance", self.n_w, w.len())?;
        let mut z = Vec::with_capacity(self.n_x + self.n_u + self.n_w);
        z.extend(x.iter().chain(u.iter()).chain(w.iter()).copied());
        Ok(z)
    }

    pub fn in_domain(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> bool {
        match (&self.domain, self.joint(x, u, w)) {
            (Some(d), Ok(z)) => d.contains(&DVector::from_vec(z)),
            (None, Ok(_)) => true,
            _ => false,
        }
    }

    /// Exact evaluation; points outside the declared domain are evaluated
    /// anyway but logged, since the Lipschitz bound no longer covers them.
    pub fn eval(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        let z = self.joint(x, u, w)?;
        if let Some(d) = &self.domain {
            if !d.contains(&DVector::from_column_slice(&z)) {
                log::warn!("dynamics evaluated outside the declared domain");
            }
        }
        Ok(DVector::from_iterator(
            self.n_x,
            self.components.iter().map(|c| c.eval(&z)),
        ))
    }

    /// Full Jacobian `[J_x J_u J_w]` at `z`.
    pub fn jacobian_at(&self, x: &DVector<f64>, u: &DVector<f64>, w: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        let z = self.joint(x, u, w)?;
        let nvars = z.len();
        Ok(DMatrix::from_fn(self.n_x, nvars, |i, j| self.jacobian[i][j].eval(&z)))
    }

    pub fn linearize(&self, p: &LinearizationPoint) -> Result<AffineModel, DynamicsError> {
        let jac = self.jacobian_at(&p.x, &p.u, &p.w)?;
        let (nx, nu, nw) = (self.n_x, self.n_u, self.n_w);
        let a = jac.columns(0, nx).into_owned();
        let b = jac.columns(nx, nu).into_owned();
        let e = jac.columns(nx + nu, nw).into_owned();
        let f = self.eval(&p.x, &p.u, &p.w)?;
        let g = f - &a * &p.x - &b * &p.u - &e * &p.w;
        Ok(AffineModel {
            a,
            b,
            e,
            g,
            point: p.clone(),
        })
    }

    /// Hessian polynomials of component `i`.
    fn hessian(&self, i: usize) -> Vec<Vec<Polynomial>> {
        self.jacobian[i]
            .iter()
            .map(|d| (0..d.nvars()).map(|k| d.derivative(k)).collect())
            .collect()
    }

    /// Per component, an interval bound on the Frobenius norm of the
    /// Hessian over the domain; Frobenius dominates the spectral norm.
    pub fn lipschitz_bound(&self) -> Result<LipschitzVector, DynamicsError> {
        let mut out = DVector::zeros(self.n_x);
        for i in 0..self.n_x {
            let hess = self.hessian(i);
            if hess.iter().flatten().all(Polynomial::is_zero) {
                continue;
            }
            let domain = self.domain.as_ref().ok_or(DynamicsError::UnboundedDomain)?;
            let boxes: Vec<Interval> = domain
                .lower()
                .iter()
                .zip(domain.upper().iter())
                .map(|(lo, hi)| Interval::new(*lo, *hi))
                .collect();
            let sum_sq: f64 = hess
                .iter()
                .flatten()
                .map(|h| {
                    let m = h.eval_interval(&boxes).magnitude();
                    m * m
                })
                .sum();
            // Outward rounding of the accumulated float error.
            out[i] = sum_sq.sqrt() * (1.0 + 1e-12);
        }
        Ok(LipschitzVector(out))
    }
}

/// `H(0, L r^2 / 2)`: the linearization error box for squared radius `r_sq`.
pub fn error_box(l: &LipschitzVector, r_sq: f64) -> Hyperrectangle {
    let half = l.0.map(|li| 0.5 * li * r_sq.max(0.0));
    Hyperrectangle::new(DVector::zeros(half.len()), half).expect("half-lengths are nonnegative")
}

/// `(c, u_bar, 0)`: the Chebyshev centers of the cell and of the
/// (symmetric) disturbance set, with the input anchor defaulting to zero.
pub fn nominal_linearization_point(
    cell: &Ellipsoid,
    inputs: &InputSet,
    disturbances: &VPolytope,
    anchor: Option<&DVector<f64>>,
) -> Result<LinearizationPoint, DynamicsError> {
    let u = anchor
        .cloned()
        .unwrap_or_else(|| DVector::zeros(inputs.dim()));
    check("input anchor", inputs.dim(), u.len())?;
    if !inputs.contains(&u, 0.0) {
        return Err(DynamicsError::AnchorOutsideInputSet);
    }
    Ok(LinearizationPoint {
        x: cell.center().clone(),
        u,
        w: DVector::zeros(disturbances.dim()),
    })
}
