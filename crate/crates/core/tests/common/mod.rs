#![allow(dead_code)]

use ellabs_core::dynamics::{Monomial, Polynomial, PolynomialSystem};
use ellabs_core::geometry::{Ellipsoid, Hyperrectangle, InputSet, VPolytope};
use ellabs_core::synthesis::{factor_stage_cost, LocalProblem, TransitionContext};
use nalgebra::{dmatrix, dvector, DMatrix, DVector};

/// Planar cubic benchmark; the domain bounds the state by `state_half`.
pub fn cubic_system(rho: f64, state_half: f64, input_half: f64, noise_half: f64) -> PolynomialSystem {
    let t = |c: f64, x: [u32; 2], u: [u32; 2], w: [u32; 2]| Monomial::new(c, &x, &u, &w);
    let f1 = Polynomial::new(
        6,
        vec![
            t(1.1, [1, 0], [0, 0], [0, 0]),
            t(-0.2, [0, 1], [0, 0], [0, 0]),
            t(-rho, [0, 3], [0, 0], [0, 0]),
            t(1.0, [0, 0], [1, 0], [0, 0]),
            t(1.0, [0, 0], [0, 0], [1, 0]),
        ],
    )
    .unwrap();
    let f2 = Polynomial::new(
        6,
        vec![
            t(0.2, [1, 0], [0, 0], [0, 0]),
            t(1.1, [0, 1], [0, 0], [0, 0]),
            t(rho, [3, 0], [0, 0], [0, 0]),
            t(1.0, [0, 0], [0, 1], [0, 0]),
            t(1.0, [0, 0], [0, 0], [0, 1]),
        ],
    )
    .unwrap();
    let half = dvector![state_half, state_half, input_half, input_half, noise_half, noise_half];
    let domain = Hyperrectangle::new(DVector::zeros(6), half).unwrap();
    PolynomialSystem::new(2, 2, 2, vec![f1, f2], Some(domain)).unwrap()
}

/// Box `|u1| <= 4, |u2| <= 5` as two degenerate ellipsoids, the disk of
/// radius 5 and the large ellipsoid `|diag(0.05, 0.033) u| <= 1`.
pub fn benchmark_inputs() -> InputSet {
    InputSet::new(vec![
        dmatrix![0.25, 0.0],
        dmatrix![0.0, 0.2],
        DMatrix::identity(2, 2) / 5.0,
        dmatrix![0.05, 0.0; 0.0, 0.033],
    ])
    .unwrap()
}

pub fn benchmark_context(rho: f64, omega: f64, state_half: f64) -> TransitionContext {
    TransitionContext::new(
        cubic_system(rho, state_half, 5.0, omega.max(1e-12)),
        benchmark_inputs(),
        VPolytope::from_box(&dvector![omega, omega]).unwrap(),
        factor_stage_cost(&DMatrix::identity(5, 5)).unwrap(),
        None,
    )
    .unwrap()
}

pub fn single_transition_target() -> Ellipsoid {
    Ellipsoid::new(dvector![4.0, 4.0], dmatrix![2.0, 0.2; 0.2, 0.55]).unwrap()
}

/// The single-transition instance with the Lipschitz domain `|x_i| <= 4.5`.
pub fn single_transition(omega: f64, rho: f64, lambda: f64) -> (TransitionContext, LocalProblem) {
    let ctx = benchmark_context(rho, omega, 4.5);
    let p = ctx
        .local_problem(&dvector![1.0, 1.0], &single_transition_target(), lambda)
        .unwrap();
    (ctx, p)
}

/// Scalar integrator `x+ = x + u + w`, `|u| <= 1`, `|w| <= 0.1`.
pub fn integrator_context() -> TransitionContext {
    let sys = PolynomialSystem::linear(&dmatrix![1.0], &dmatrix![1.0], &dmatrix![1.0], None).unwrap();
    TransitionContext::new(
        sys,
        InputSet::new(vec![dmatrix![1.0]]).unwrap(),
        VPolytope::new(vec![dvector![-0.1], dvector![0.1]]).unwrap(),
        factor_stage_cost(&DMatrix::identity(3, 3)).unwrap(),
        None,
    )
    .unwrap()
}

/// Largest half-width `h` of `[c - h, c + h]` for which `u = K (x - c) + l`
/// keeps `|u| <= 1` and maps into `[-1, 1]` under `|w| <= 0.1`.
pub fn integrator_max_half_width(c: f64, k: f64, l: f64) -> f64 {
    let reach = 1.0 - 0.1 - (c + l).abs();
    let input = 1.0 - l.abs();
    if reach < 0.0 || input < 0.0 {
        return -1.0;
    }
    let a = (reach / (1.0 + k).abs()).min(f64::MAX);
    let b = (input / k.abs()).min(f64::MAX);
    a.min(b)
}

/// Exhaustive grid over `(K, l)` at step `step`; returns `(h, K, l)`.
pub fn integrator_grid_oracle(c: f64, step: f64) -> (f64, f64, f64) {
    let mut best = (-1.0, 0.0, 0.0);
    let nk = (3.0 / step).round() as i64;
    let nl = (3.0 / step).round() as i64;
    for i in 0..=nk {
        let k = -2.5 + i as f64 * step;
        for j in 0..=nl {
            let l = -1.5 + j as f64 * step;
            let h = integrator_max_half_width(c, k, l);
            if h > best.0 {
                best = (h, k, l);
            }
        }
    }
    best
}

/// Worst sampled quantities for one synthesized transition.
#[derive(Debug, Default)]
pub struct SampledTransition {
    pub violations: usize,
    pub worst_target_form: f64,
    pub worst_input_norm: f64,
    pub worst_cost: f64,
    pub worst_state_sq: f64,
    pub worst_input_sq: f64,
    pub checked: usize,
}

/// Samples `x` uniformly in the cell and pushes it through the true
/// dynamics with every noise vertex and `random_w` random disturbances.
pub fn sample_transition(
    ctx: &TransitionContext,
    cell: &Ellipsoid,
    controller: &ellabs_core::synthesis::AffineController,
    target: &Ellipsoid,
    samples: usize,
    random_w: usize,
    seed: u64,
) -> SampledTransition {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut out = SampledTransition::default();
    let u_bar = ctx.anchor.clone().unwrap_or_else(|| DVector::zeros(ctx.inputs.dim()));
    for _ in 0..samples {
        let x = cell.sample_uniform(&mut rng);
        let u = controller.apply(&x);
        out.worst_input_norm = out.worst_input_norm.max(ctx.inputs.max_norm(&u));
        out.worst_cost = out.worst_cost.max(ctx.cost.eval(&x, &u));
        out.worst_state_sq = out.worst_state_sq.max((&x - cell.center()).norm_squared());
        out.worst_input_sq = out.worst_input_sq.max((&u - &u_bar).norm_squared());
        let mut ws: Vec<DVector<f64>> = ctx.disturbances.vertices().to_vec();
        for _ in 0..random_w {
            ws.push(ctx.disturbances.sample(&mut rng));
        }
        for w in &ws {
            let next = ctx.system.eval(&x, &u, w).unwrap();
            let form = target.quad_form(&next);
            out.worst_target_form = out.worst_target_form.max(form);
            if !ellabs_core::geometry::contains_point(target, &next).unwrap() {
                out.violations += 1;
            }
            out.checked += 1;
        }
    }
    out
}

/// The planar reach-avoid benchmark shipped as `benchmark_2d.problem`: state box
/// `[-12, 4]^2`, start near `(-10, -10)`, target around `(2, 2)`, one
/// obstacle around `(-5, -3)` and `|w_i| <= 0.01`.
pub fn benchmark_2d() -> ellabs_core::abstraction::ReachAvoidProblem {
    use ellabs_core::abstraction::{ReachAvoidProblem, ReachAvoidSpec};
    let boxed = |c: [f64; 2], h: [f64; 2]| Hyperrectangle::new(dvector![c[0], c[1]], dvector![h[0], h[1]]).unwrap();
    let mut sys = cubic_system(0.0005, 1.0, 1.0, 1.0);
    let domain = Hyperrectangle::new(
        dvector![-4.0, -4.0, 0.0, 0.0, 0.0, 0.0],
        dvector![8.0, 8.0, 4.0, 5.0, 0.01, 0.01],
    )
    .unwrap();
    sys = PolynomialSystem::new(2, 2, 2, sys.components().to_vec(), Some(domain)).unwrap();
    let context = TransitionContext::new(
        sys,
        benchmark_inputs(),
        VPolytope::from_box(&dvector![0.01, 0.01]).unwrap(),
        factor_stage_cost(&DMatrix::identity(5, 5)).unwrap(),
        None,
    )
    .unwrap();
    ReachAvoidProblem {
        context,
        spec: ReachAvoidSpec {
            state_box: boxed([-4.0, -4.0], [8.0, 8.0]),
            initial: boxed([-10.0, -10.0], [0.25, 0.25]),
            target: boxed([2.0, 2.0], [1.5, 1.5]),
            obstacles: vec![boxed([-5.0, -3.0], [1.0, 1.0])],
        },
    }
}

/// Build parameters matching `benchmark_2d.problem`.
pub fn benchmark_2d_params(seed: u64, improve_budget: usize) -> ellabs_core::abstraction::BuildParams {
    ellabs_core::abstraction::BuildParams {
        seed,
        improve_budget,
        ..Default::default()
    }
}
