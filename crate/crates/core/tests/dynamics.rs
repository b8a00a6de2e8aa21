//! Linearization, Jacobians and Lipschitz bounds against numerical oracles.

mod common;

use common::cubic_system;
use ellabs_core::dynamics::*;
use ellabs_core::geometry::Hyperrectangle;
use nalgebra::{dvector, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sample_box<R: Rng>(rng: &mut R, b: &Hyperrectangle) -> DVector<f64> {
    DVector::from_fn(b.dim(), |i, _| rng.random_range(b.lower()[i]..=b.upper()[i]))
}

fn split(sys: &PolynomialSystem, z: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let (nx, nu, nw) = (sys.n_x(), sys.n_u(), sys.n_w());
    (
        z.rows(0, nx).into_owned(),
        z.rows(nx, nu).into_owned(),
        z.rows(nx + nu, nw).into_owned(),
    )
}

/// Cubic benchmark plus a system with cross terms in state, input and noise.
fn systems() -> Vec<PolynomialSystem> {
    let coupled = {
        let t = |c: f64, x: [u32; 2], u: [u32; 1], w: [u32; 1]| Monomial::new(c, &x, &u, &w);
        let f1 = Polynomial::new(
            4,
            vec![t(0.9, [1, 0], [0], [0]), t(0.1, [1, 1], [0], [0]), t(0.05, [0, 0], [2], [0]), t(1.0, [0, 0], [0], [1])],
        )
        .unwrap();
        let f2 = Polynomial::new(
            4,
            vec![t(-0.02, [2, 1], [0], [0]), t(0.3, [0, 1], [1], [0]), t(0.5, [0, 0], [1], [0]), t(0.2, [1, 0], [0], [1])],
        )
        .unwrap();
        let domain = Hyperrectangle::new(dvector![0.5, -0.5, 0.0, 0.0], dvector![3.0, 2.0, 1.5, 0.2]).unwrap();
        PolynomialSystem::new(2, 1, 1, vec![f1, f2], Some(domain)).unwrap()
    };
    vec![cubic_system(0.0005, 16.0, 5.0, 0.1), cubic_system(0.01, 4.5, 5.0, 0.1), coupled]
}

#[test]
fn linearization_residual_within_error_box() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for sys in systems() {
        let domain = sys.domain().unwrap().clone();
        let l = sys.lipschitz_bound().unwrap();
        for _ in 0..5 {
            let (x, u, w) = split(&sys, &sample_box(&mut rng, &domain));
            let model = sys.linearize(&LinearizationPoint { x, u, w }).unwrap();
            let p = &model.point;
            let pz: DVector<f64> = DVector::from_iterator(domain.dim(), p.x.iter().chain(p.u.iter()).chain(p.w.iter()).copied());
            let mut worst = 0.0f64;
            for _ in 0..10_000 {
                let z = sample_box(&mut rng, &domain);
                let (x, u, w) = split(&sys, &z);
                let r_sq = (&z - &pz).norm_squared();
                let err = sys.eval(&x, &u, &w).unwrap() - model.eval(&x, &u, &w);
                let bound = error_box(&l, r_sq);
                for i in 0..sys.n_x() {
                    assert!(
                        err[i].abs() <= bound.upper()[i] + 1e-9,
                        "component {i}: residual {} above {}",
                        err[i].abs(),
                        bound.upper()[i]
                    );
                    if bound.upper()[i] > 0.0 {
                        worst = worst.max(err[i].abs() / bound.upper()[i]);
                    }
                }
            }
            // The bound should not be vacuous either.
            assert!(worst > 1e-3, "ratio {worst}");
        }
    }
}

#[test]
fn jacobians_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for sys in systems() {
        let domain = sys.domain().unwrap().clone();
        for _ in 0..100 {
            let z = sample_box(&mut rng, &domain);
            let (x, u, w) = split(&sys, &z);
            let jac = sys.jacobian_at(&x, &u, &w).unwrap();
            let mut fd = DMatrix::zeros(sys.n_x(), z.len());
            for j in 0..z.len() {
                let h = 1e-5 * z[j].abs().max(1.0);
                let (mut hi, mut lo) = (z.clone(), z.clone());
                hi[j] += h;
                lo[j] -= h;
                let (xh, uh, wh) = split(&sys, &hi);
                let (xl, ul, wl) = split(&sys, &lo);
                let d = (sys.eval(&xh, &uh, &wh).unwrap() - sys.eval(&xl, &ul, &wl).unwrap()) / (2.0 * h);
                fd.set_column(j, &d);
            }
            let scale = jac.amax().max(1.0);
            assert!((&jac - &fd).amax() <= 1e-6 * scale, "jacobian {jac} vs {fd}");

            let model = sys.linearize(&LinearizationPoint { x: x.clone(), u: u.clone(), w: w.clone() }).unwrap();
            let f = sys.eval(&x, &u, &w).unwrap();
            assert!((model.eval(&x, &u, &w) - &f).amax() <= 1e-12 * f.amax().max(1.0));
        }
    }
}

/// Hessian of component `i` by central differences of the Jacobian row.
fn fd_hessian(sys: &PolynomialSystem, i: usize, z: &DVector<f64>) -> DMatrix<f64> {
    let n = z.len();
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let step = 1e-5 * z[j].abs().max(1.0);
        let (mut hi, mut lo) = (z.clone(), z.clone());
        hi[j] += step;
        lo[j] -= step;
        let (xh, uh, wh) = split(sys, &hi);
        let (xl, ul, wl) = split(sys, &lo);
        let d = (sys.jacobian_at(&xh, &uh, &wh).unwrap().row(i) - sys.jacobian_at(&xl, &ul, &wl).unwrap().row(i))
            / (2.0 * step);
        h.set_row(j, &d);
    }
    h
}

#[test]
fn lipschitz_bound_dominates_sampled_hessians() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for sys in systems() {
        let domain = sys.domain().unwrap().clone();
        let l = sys.lipschitz_bound().unwrap();
        let mut sampled = DVector::<f64>::zeros(sys.n_x());
        for _ in 0..10_000 {
            let z = sample_box(&mut rng, &domain);
            for i in 0..sys.n_x() {
                let h = fd_hessian(&sys, i, &z);
                let spectral = h.singular_values().max();
                sampled[i] = sampled[i].max(spectral);
            }
        }
        for i in 0..sys.n_x() {
            assert!(l.0[i] >= sampled[i] * (1.0 - 1e-6), "L_{i} = {} below sampled {}", l.0[i], sampled[i]);
        }
    }
}

#[test]
fn cubic_hessian_bound_is_tight() {
    // Only the cubic terms curve: |d^2/dx^2 rho x^3| = 6 rho |x|.
    let sys = cubic_system(0.0005, 16.0, 5.0, 0.1);
    let l = sys.lipschitz_bound().unwrap();
    for li in l.0.iter() {
        assert!((li - 0.048).abs() < 1e-12, "{li}");
    }
    let b = error_box(&l, 2.0);
    assert!((b.upper() - dvector![0.048, 0.048]).amax() < 1e-12);
    assert_eq!(b.lower(), -b.upper());
}

#[test]
fn affine_dynamics_have_exact_models() {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
    let b = DMatrix::from_row_slice(2, 1, &[0.0, 0.1]);
    let e = DMatrix::identity(2, 2);
    let sys = PolynomialSystem::linear(&a, &b, &e, None).unwrap();
    assert!(sys.lipschitz_bound().unwrap().is_zero());
    let model = sys
        .linearize(&LinearizationPoint { x: dvector![3.0, -1.0], u: dvector![0.5], w: dvector![0.0, 0.0] })
        .unwrap();
    assert_eq!(model.a, a);
    assert_eq!(model.b, b);
    assert!(model.g.amax() < 1e-15);
}
