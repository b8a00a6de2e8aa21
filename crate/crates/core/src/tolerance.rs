//! Numerical tolerances shared across the crate.
//!
//! Every threshold used by the geometric predicates, the conic solver and
//! the builder lives here so that a caller (typically the CLI) can override
//! them in one place.

/// Collected tolerances. `Default` gives the reference values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Slack on the quadratic form in point membership tests.
    pub membership: f64,
    /// Relative Frobenius asymmetry allowed for shape matrices.
    pub symmetry: f64,
    /// Relative tolerance of the scalar S-procedure searches.
    pub s_procedure: f64,
    /// Relative tolerance of the obstacle shrink bisection on gamma.
    pub shrink: f64,
    /// Tolerance of the secular-equation solves.
    pub secular: f64,
    /// Shift `eps * I` imposed on every LMI.
    pub lmi_margin: f64,
    /// Target duality gap of the barrier solver, relative to `max(1, |obj|)`.
    pub solver_gap: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            membership: 1e-9,
            symmetry: 1e-9,
            s_procedure: 1e-9,
            shrink: 1e-6,
            secular: 1e-10,
            lmi_margin: 1e-8,
            solver_gap: 1e-8,
        }
    }
}
