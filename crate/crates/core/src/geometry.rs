//! Set primitives: ellipsoids, hyperrectangles, V-polytopes and
//! ellipsoidal input sets, together with the predicates the builder needs
//! on its hot path (membership, inclusion, disjointness, obstacle shrink).
//!
//! Inclusion and disjointness are decided by scalar searches derived from
//! the S-procedure, so no conic solve is required for either.

use alloc::vec::Vec;
use core::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
#[allow(unused_imports)]
use num_traits::Float;
use rand::Rng;
use thiserror::Error;

use crate::tolerance::Tolerances;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape matrix is not symmetric (relative asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("shape matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value in geometric data")]
    NonFinite,
    #[error("negative half-length {0} on axis {1}")]
    NegativeHalfLength(f64, usize),
    #[error("degenerate hyperrectangle: half-length on axis {0} is zero")]
    DegenerateBox(usize),
    #[error("polytope has no vertices")]
    EmptyPolytope,
    #[error("origin is not in the convex hull of the disturbance vertices")]
    OriginNotInHull,
    #[error("input set has no constraints")]
    EmptyInputSet,
    #[error("ellipsoid center lies inside an obstacle")]
    CenterBlocked,
}

fn check_dim(expected: usize, got: usize) -> Result<(), GeometryError> {
    if expected == got {
        Ok(())
    } else {
        Err(GeometryError::DimensionMismatch { expected, got })
    }
}

/// `E(c, P) = { x : (x - c)' P (x - c) <= 1 }` with `P` symmetric positive definite.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
}

impl Ellipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>) -> Result<Self, GeometryError> {
        let n = center.len();
        check_dim(n, shape.nrows())?;
        check_dim(n, shape.ncols())?;
        if center.iter().chain(shape.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let norm = shape.norm();
        let asym = (&shape - shape.transpose()).norm();
        if norm > 0.0 && asym > Tolerances::default().symmetry * norm {
            return Err(GeometryError::NotSymmetric(asym / norm));
        }
        let shape = (&shape + shape.transpose()) * 0.5;
        if shape.clone().cholesky().is_none() {
            return Err(GeometryError::NotPositiveDefinite);
        }
        Ok(Self { center, shape })
    }

    /// Euclidean ball `E(c, r^-2 I)`.
    pub fn ball(center: DVector<f64>, radius: f64) -> Result<Self, GeometryError> {
        let n = center.len();
        Self::new(center, DMatrix::identity(n, n) / (radius * radius))
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    /// `(x - c)' P (x - c)`; panics on dimension mismatch.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.center;
        d.dot(&(&self.shape * &d))
    }

    /// `E(c, gamma P)`; `gamma > 1` shrinks the set.
    pub fn scaled(&self, gamma: f64) -> Self {
        Self {
            center: self.center.clone(),
            shape: &self.shape * gamma,
        }
    }

    /// The symmetric square root of `P^-1`, i.e. the map from the unit ball onto the cell.
    pub fn inv_sqrt_shape(&self) -> DMatrix<f64> {
        let eig = SymmetricEigen::new(self.shape.clone());
        let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
        &eig.eigenvectors * d * eig.eigenvectors.transpose()
    }

    /// Semi-axis lengths in ascending order.
    pub fn semi_axes(&self) -> Vec<f64> {
        let eig = SymmetricEigen::new(self.shape.clone());
        let mut axes: Vec<f64> = eig.eigenvalues.iter().map(|l| 1.0 / l.sqrt()).collect();
        axes.sort_by(|a, b| a.total_cmp(b));
        axes
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let eig = SymmetricEigen::new(self.shape.clone());
        eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Tightest axis-aligned box: half-lengths `sqrt(diag(P^-1))`.
    pub fn bounding_box(&self) -> Hyperrectangle {
        let inv = self
            .shape
            .clone()
            .cholesky()
            .expect("shape validated positive definite")
            .inverse();
        Hyperrectangle {
            center: self.center.clone(),
            half_lengths: inv.diagonal().map(|v| v.max(0.0).sqrt()),
        }
    }

    /// Uniform sample by rejection in the bounding box.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let bbox = self.bounding_box();
        loop {
            let x = bbox.sample_uniform(rng);
            if self.quad_form(&x) <= 1.0 {
                return x;
            }
        }
    }

    /// Point on the boundary with a uniformly distributed direction in the
    /// unit-ball frame of the cell.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let y = loop {
            let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
            let r = y.norm();
            if r > 1e-6 && r <= 1.0 {
                break y / r;
            }
        };
        &self.center + self.inv_sqrt_shape() * y
    }
}

/// `H(c, h) = { x : |x_i - c_i| <= h_i }`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperrectangle {
    center: DVector<f64>,
    half_lengths: DVector<f64>,
}

impl Hyperrectangle {
    pub fn new(center: DVector<f64>, half_lengths: DVector<f64>) -> Result<Self, GeometryError> {
        check_dim(center.len(), half_lengths.len())?;
        if center.iter().chain(half_lengths.iter()).any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if let Some((i, h)) = half_lengths.iter().enumerate().find(|(_, h)| **h < 0.0) {
            return Err(GeometryError::NegativeHalfLength(*h, i));
        }
        Ok(Self {
            center,
            half_lengths,
        })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn half_lengths(&self) -> &DVector<f64> {
        &self.half_lengths
    }

    pub fn lower(&self) -> DVector<f64> {
        &self.center - &self.half_lengths
    }

    pub fn upper(&self) -> DVector<f64> {
        &self.center + &self.half_lengths
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.center.iter().zip(self.half_lengths.iter()))
                .all(|(xi, (ci, hi))| (xi - ci).abs() <= *hi)
    }

    /// All `2^n` vertices; vertex `k` takes `+h_i` where bit `i` of `k` is set.
    pub fn vertices(&self) -> Vec<DVector<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|k| {
                DVector::from_fn(n, |i, _| {
                    let sign = if (k >> i) & 1 == 1 { 1.0 } else { -1.0 };
                    self.center[i] + sign * self.half_lengths[i]
                })
            })
            .collect()
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        DVector::from_fn(self.dim(), |i, _| {
            let h = self.half_lengths[i];
            if h == 0.0 {
                self.center[i]
            } else {
                self.center[i] + rng.random_range(-h..=h)
            }
        })
    }
}

/// Convex hull of finitely many points, required to contain the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct VPolytope {
    vertices: Vec<DVector<f64>>,
}

impl VPolytope {
    pub fn new(vertices: Vec<DVector<f64>>) -> Result<Self, GeometryError> {
        let first = vertices.first().ok_or(GeometryError::EmptyPolytope)?;
        let n = first.len();
        for v in &vertices {
            check_dim(n, v.len())?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(GeometryError::NonFinite);
            }
        }
        let scale = vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
        let gap = min_norm_in_hull(&vertices);
        if gap > 1e-9 * scale.max(1e-300) {
            return Err(GeometryError::OriginNotInHull);
        }
        Ok(Self { vertices })
    }

    /// Box `H(0, h)` as its `2^n` vertices.
    pub fn from_box(half_lengths: &DVector<f64>) -> Result<Self, GeometryError> {
        let b = Hyperrectangle::new(DVector::zeros(half_lengths.len()), half_lengths.clone())?;
        Self::new(b.vertices())
    }

    pub fn dim(&self) -> usize {
        self.vertices[0].len()
    }

    pub fn vertices(&self) -> &[DVector<f64>] {
        &self.vertices
    }

    /// Uniform-ish interior point: a random convex combination of the vertices.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        // Exponential spacings give a uniform point on the simplex.
        let weights: Vec<f64> = self
            .vertices
            .iter()
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut w = DVector::zeros(self.dim());
        for (v, a) in self.vertices.iter().zip(&weights) {
            w += v * (*a / total);
        }
        w
    }
}

/// Euclidean norm of the min-norm point of `co(points)` (Wolfe's algorithm).
fn min_norm_in_hull(points: &[DVector<f64>]) -> f64 {
    let mut active: Vec<usize> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    let start = (0..points.len())
        .min_by(|a, b| points[*a].norm().total_cmp(&points[*b].norm()))
        .unwrap_or(0);
    active.push(start);
    weights.push(1.0);
    let mut x = points[start].clone();
    let scale = points.iter().map(|p| p.norm_squared()).fold(1e-300, f64::max);
    for _ in 0..(50 * points.len() + 50) {
        if x.norm_squared() <= 1e-24 * scale {
            return x.norm();
        }
        let (j, best) = points
            .iter()
            .enumerate()
            .map(|(j, p)| (j, x.dot(p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap_or((0, 0.0));
        if x.norm_squared() - best <= 1e-12 * scale || active.contains(&j) {
            return x.norm();
        }
        active.push(j);
        weights.push(0.0);
        loop {
            let k = active.len();
            // Affine minimizer over the active set: solve [G 1; 1' 0][a; m] = [0; 1].
            let mut sys = DMatrix::zeros(k + 1, k + 1);
            let mut rhs = DVector::zeros(k + 1);
            for (r, &i) in active.iter().enumerate() {
                for (c, &j) in active.iter().enumerate() {
                    sys[(r, c)] = points[i].dot(&points[j]);
                }
                sys[(r, k)] = 1.0;
                sys[(k, r)] = 1.0;
            }
            rhs[k] = 1.0;
            let Some(sol) = sys.lu().solve(&rhs) else {
                return x.norm();
            };
            let alpha: Vec<f64> = (0..k).map(|i| sol[i]).collect();
            if alpha.iter().all(|a| *a > 1e-14) {
                weights = alpha;
                break;
            }
            let mut theta = 1.0f64;
            for (w, a) in weights.iter().zip(&alpha) {
                if *a < *w {
                    theta = theta.min(*w / (*w - *a));
                }
            }
            for (w, a) in weights.iter_mut().zip(&alpha) {
                *w = theta * *a + (1.0 - theta) * *w;
            }
            let mut i = 0;
            while i < active.len() {
                if weights[i] <= 1e-14 {
                    active.remove(i);
                    weights.remove(i);
                } else {
                    i += 1;
                }
            }
            if active.is_empty() {
                return x.norm();
            }
        }
        x = DVector::zeros(points[0].len());
        for (&i, w) in active.iter().zip(&weights) {
            x += &points[i] * *w;
        }
    }
    x.norm()
}

/// `U = { u : ||U_k u|| <= 1 for all k }`; rank-deficient `U_k` allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct InputSet {
    constraints: Vec<DMatrix<f64>>,
}

impl InputSet {
    pub fn new(constraints: Vec<DMatrix<f64>>) -> Result<Self, GeometryError> {
        let first = constraints.first().ok_or(GeometryError::EmptyInputSet)?;
        let n = first.ncols();
        for u in &constraints {
            check_dim(n, u.ncols())?;
            if u.iter().any(|x| !x.is_finite()) {
                return Err(GeometryError::NonFinite);
            }
        }
        Ok(Self { constraints })
    }

    pub fn dim(&self) -> usize {
        self.constraints[0].ncols()
    }

    pub fn constraints(&self) -> &[DMatrix<f64>] {
        &self.constraints
    }

    /// Largest `||U_k u||` over the constraints.
    pub fn max_norm(&self, u: &DVector<f64>) -> f64 {
        self.constraints
            .iter()
            .map(|m| (m * u).norm())
            .fold(0.0, f64::max)
    }

    pub fn contains(&self, u: &DVector<f64>, slack: f64) -> bool {
        u.len() == self.dim() && self.max_norm(u) <= 1.0 + slack
    }
}

/// `(x - c)' P (x - c) <= 1 + 1e-9`.
pub fn contains_point(e: &Ellipsoid, x: &DVector<f64>) -> Result<bool, GeometryError> {
    check_dim(e.dim(), x.len())?;
    Ok(e.quad_form(x) <= 1.0 + Tolerances::default().membership)
}

/// Data of the quadratic `y -> (L1 y + d)' P2 (L1 y + d)` expressed in the
/// eigenbasis of `M = L1 P2 L1`, where `L1 = P1^{-1/2}` maps the unit ball
/// onto the first ellipsoid and `d = c1 - c2`.
struct UnitFrame {
    mu: DVector<f64>,
    b: DVector<f64>,
    dpd: f64,
}

fn unit_frame(first: &Ellipsoid, second: &Ellipsoid) -> UnitFrame {
    let l1 = first.inv_sqrt_shape();
    let d = first.center() - second.center();
    let m = &l1 * second.shape() * &l1;
    let m = (&m + m.transpose()) * 0.5;
    let b = &l1 * (second.shape() * &d);
    let eig = SymmetricEigen::new(m);
    UnitFrame {
        b: eig.eigenvectors.transpose() * b,
        mu: eig.eigenvalues,
        dpd: d.dot(&(second.shape() * &d)),
    }
}

/// Decides `inner ⊆ outer` through the S-procedure multiplier `lambda`:
/// the inclusion holds iff `[lambda I - M, -b; -b', -lambda - s] ⪰ 0` for
/// some `lambda >= 0`. The Schur complement is concave in `lambda`, so its
/// maximizer is found by bisection on the (monotone) derivative and the
/// final answer is an eigenvalue check of the block matrix there.
pub fn ellipsoid_inclusion(inner: &Ellipsoid, outer: &Ellipsoid) -> Result<bool, GeometryError> {
    check_dim(inner.dim(), outer.dim())?;
    let tol = Tolerances::default().s_procedure;
    let UnitFrame { mu, b, dpd } = unit_frame(inner, outer);
    let s = dpd - 1.0;
    let n = mu.len();
    let mu_max = mu.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let b_norm = b.norm();
    let slope = |lam: f64| -> f64 {
        -1.0 + (0..n)
            .map(|i| b[i] * b[i] / ((lam - mu[i]) * (lam - mu[i])))
            .sum::<f64>()
    };
    let scale = mu_max.abs().max(b_norm).max(1.0);
    let top_coupled = (0..n).any(|i| mu_max - mu[i] <= 1e-12 * scale && b[i].abs() > 1e-12 * scale);
    let lam = if !top_coupled && slope(mu_max + 1e-12 * scale) <= 0.0 {
        mu_max
    } else {
        let (mut lo, mut hi) = (mu_max, mu_max + b_norm + 1e-12 * scale);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if slope(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * scale {
                break;
            }
        }
        0.5 * (lo + hi)
    };
    let lam = lam.max(0.0);
    let mut block = DMatrix::zeros(n + 1, n + 1);
    for i in 0..n {
        block[(i, i)] = lam - mu[i];
        block[(i, n)] = -b[i];
        block[(n, i)] = -b[i];
    }
    block[(n, n)] = -lam - s;
    let min_eig = SymmetricEigen::new(block.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    let bscale = block.norm().max(1.0);
    Ok(min_eig >= -tol * bscale)
}

/// Minimum of the `b`-quadratic form over the unit-ball frame of `a`.
/// Reduces to a trust-region subproblem whose multiplier solves a
/// one-dimensional secular equation.
fn min_form_over(a: &Ellipsoid, b: &Ellipsoid) -> f64 {
    let UnitFrame { mu, b: bt, dpd } = unit_frame(a, b);
    let n = mu.len();
    // The unconstrained minimizer is `-L1^{-1} d`; its norm is `d' P1 d`.
    let d = a.center() - b.center();
    if d.dot(&(a.shape() * &d)) <= 1.0 {
        return 0.0;
    }
    let norm_sq = |nu: f64| -> f64 {
        (0..n)
            .map(|i| bt[i] * bt[i] / ((mu[i] + nu) * (mu[i] + nu)))
            .sum::<f64>()
    };
    let (mut lo, mut hi) = (0.0f64, bt.norm().max(1e-300));
    while norm_sq(hi) > 1.0 {
        hi *= 2.0;
    }
    let tol = Tolerances::default().secular;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_sq(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= tol * hi.max(1e-300) * 1e-3 {
            break;
        }
    }
    let nu = 0.5 * (lo + hi);
    let mut value = dpd;
    let mut ynorm = 0.0;
    let mut ys = DVector::zeros(n);
    for i in 0..n {
        let y = -bt[i] / (mu[i] + nu);
        ys[i] = y;
        ynorm += y * y;
    }
    // Project onto the sphere to stay feasible before evaluating.
    let r = ynorm.sqrt();
    for i in 0..n {
        let y = ys[i] / r;
        value += mu[i] * y * y + 2.0 * bt[i] * y;
    }
    value
}

/// `a ∩ b = ∅`, decided by minimizing `b`'s quadratic form over `a`.
pub fn ellipsoids_disjoint(a: &Ellipsoid, b: &Ellipsoid) -> Result<bool, GeometryError> {
    check_dim(a.dim(), b.dim())?;
    Ok(min_form_over(a, b) > 1.0 + Tolerances::default().s_procedure)
}

/// Result of [`shrink_to_avoid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Shrunk {
    pub ellipsoid: Ellipsoid,
    pub gamma: f64,
}

/// Smallest `gamma >= 1` (to relative tolerance) such that `E(c, gamma P)`
/// misses every obstacle.
pub fn shrink_to_avoid(
    e: &Ellipsoid,
    obstacles: &[Ellipsoid],
    tol: &Tolerances,
) -> Result<Shrunk, GeometryError> {
    for o in obstacles {
        check_dim(e.dim(), o.dim())?;
        if o.quad_form(e.center()) <= 1.0 {
            return Err(GeometryError::CenterBlocked);
        }
    }
    let clear = |gamma: f64| -> bool {
        let s = e.scaled(gamma);
        obstacles.iter().all(|o| min_form_over(&s, o) > 1.0 + tol.s_procedure)
    };
    if clear(1.0) {
        return Ok(Shrunk {
            ellipsoid: e.clone(),
            gamma: 1.0,
        });
    }
    let mut lo = 1.0;
    let mut hi = 2.0;
    while !clear(hi) {
        lo = hi;
        hi *= 2.0;
        if hi > 1e15 {
            return Err(GeometryError::CenterBlocked);
        }
    }
    while (hi - lo) > tol.shrink * hi {
        let mid = 0.5 * (lo + hi);
        if clear(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Shrunk {
        ellipsoid: e.scaled(hi),
        gamma: hi,
    })
}

/// Euclidean distance from `x` to the set `e` (zero inside).
pub fn point_to_ellipsoid_distance(x: &DVector<f64>, e: &Ellipsoid) -> Result<f64, GeometryError> {
    Ok((x - project_onto_ellipsoid(x, e)?).norm())
}

/// Closest point of `e` to `x`, computed in the eigenbasis of the shape
/// matrix from the secular equation of the Lagrange multiplier.
pub fn project_onto_ellipsoid(x: &DVector<f64>, e: &Ellipsoid) -> Result<DVector<f64>, GeometryError> {
    check_dim(e.dim(), x.len())?;
    if e.quad_form(x) <= 1.0 {
        return Ok(x.clone());
    }
    let eig = SymmetricEigen::new(e.shape().clone());
    let y = eig.eigenvectors.transpose() * (x - e.center());
    let lam = &eig.eigenvalues;
    let n = y.len();
    // Closest point z_i = y_i / (1 + nu lam_i) with sum lam_i z_i^2 = 1.
    let h = |nu: f64| -> f64 {
        (0..n)
            .map(|i| {
                let z = y[i] / (1.0 + nu * lam[i]);
                lam[i] * z * z
            })
            .sum::<f64>()
            - 1.0
    };
    let dh = |nu: f64| -> f64 {
        (0..n)
            .map(|i| {
                let q = 1.0 + nu * lam[i];
                -2.0 * lam[i] * lam[i] * y[i] * y[i] / (q * q * q)
            })
            .sum::<f64>()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while h(hi) > 0.0 {
        lo = hi;
        hi *= 2.0;
    }
    let tol = Tolerances::default().secular;
    let mut nu = 0.5 * (lo + hi);
    for _ in 0..200 {
        let v = h(nu);
        if v > 0.0 {
            lo = nu;
        } else {
            hi = nu;
        }
        let step = v / dh(nu);
        let mut next = nu - step;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - nu).abs() <= tol * nu.max(1.0) * 1e-2 || hi - lo <= tol * 1e-3 * hi {
            nu = next;
            break;
        }
        nu = next;
    }
    let z = DVector::from_fn(n, |i, _| y[i] / (1.0 + nu * lam[i]));
    Ok(&eig.eigenvectors * z + e.center())
}

/// Euclidean distance between two ellipsoids (zero when they meet), by
/// alternating projections between the two sets.
pub fn ellipsoid_distance(a: &Ellipsoid, b: &Ellipsoid) -> Result<f64, GeometryError> {
    check_dim(a.dim(), b.dim())?;
    if !ellipsoids_disjoint(a, b)? {
        return Ok(0.0);
    }
    let mut p = project_onto_ellipsoid(b.center(), a)?;
    let mut q = project_onto_ellipsoid(&p, b)?;
    let mut d = (&p - &q).norm();
    for _ in 0..2000 {
        p = project_onto_ellipsoid(&q, a)?;
        q = project_onto_ellipsoid(&p, b)?;
        let next = (&p - &q).norm();
        if d - next <= 1e-12 * d.max(1.0) {
            return Ok(next);
        }
        d = next;
    }
    Ok(d)
}

/// Smallest `gamma >= 1` such that `E(c, gamma P)` lies in the box.
pub fn fit_inside_box(e: &Ellipsoid, bounds: &Hyperrectangle) -> Result<Shrunk, GeometryError> {
    check_dim(e.dim(), bounds.dim())?;
    let inv = e
        .shape()
        .clone()
        .cholesky()
        .ok_or(GeometryError::NotPositiveDefinite)?
        .inverse();
    let (lo, hi) = (bounds.lower(), bounds.upper());
    let mut gamma: f64 = 1.0;
    for i in 0..e.dim() {
        let room = (e.center()[i] - lo[i]).min(hi[i] - e.center()[i]);
        if room <= 0.0 {
            return Err(GeometryError::CenterBlocked);
        }
        // Half-extent along axis i is sqrt(inv_ii / gamma).
        gamma = gamma.max(inv[(i, i)] / (room * room) * (1.0 + 1e-12));
    }
    Ok(Shrunk {
        ellipsoid: e.scaled(gamma),
        gamma,
    })
}

/// Circumscribed axis-aligned ellipsoid `E(c, diag(1 / (n h_i^2)))`.
pub fn box_outer_ellipsoid(h: &Hyperrectangle) -> Result<Ellipsoid, GeometryError> {
    let n = h.dim() as f64;
    box_ellipsoid(h, n)
}

/// Inscribed axis-aligned ellipsoid `E(c, diag(1 / h_i^2))`.
pub fn box_inner_ellipsoid(h: &Hyperrectangle) -> Result<Ellipsoid, GeometryError> {
    box_ellipsoid(h, 1.0)
}

fn box_ellipsoid(h: &Hyperrectangle, factor: f64) -> Result<Ellipsoid, GeometryError> {
    if let Some(i) = h.half_lengths().iter().position(|v| *v == 0.0) {
        return Err(GeometryError::DegenerateBox(i));
    }
    let diag = h.half_lengths().map(|v| 1.0 / (factor * v * v));
    Ellipsoid::new(h.center().clone(), DMatrix::from_diagonal(&diag))
}

/// Volume of the n-dimensional unit ball.
pub fn unit_ball_volume(n: usize) -> f64 {
    let mut v = if n.is_multiple_of(2) { 1.0 } else { 2.0 };
    let mut k = if n.is_multiple_of(2) { 2 } else { 3 };
    while k <= n {
        v *= 2.0 * PI / k as f64;
        k += 2;
    }
    v
}

/// `vol(E) = vol(B_n) / sqrt(det P)`.
pub fn volume(e: &Ellipsoid) -> f64 {
    unit_ball_volume(e.dim()) / e.shape().determinant().sqrt()
}

/// `max_i ||w_i - w_bar||^2`, exact since the maximum of a convex function
/// over a polytope is attained at a vertex.
pub fn max_sq_dist_to_point(w: &VPolytope, w_bar: &DVector<f64>) -> Result<f64, GeometryError> {
    check_dim(w.dim(), w_bar.len())?;
    Ok(w
        .vertices()
        .iter()
        .map(|v| (v - w_bar).norm_squared())
        .fold(0.0, f64::max))
}
