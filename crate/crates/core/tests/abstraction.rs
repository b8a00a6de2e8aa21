//! Builder, value table and closed loop on the planar benchmark.

mod common;

use std::sync::OnceLock;

use common::*;
use ellabs_core::abstraction::*;
use ellabs_core::conic::BarrierSolver;
use ellabs_core::geometry::{ellipsoid_inclusion, ellipsoids_disjoint, Ellipsoid, Hyperrectangle};
use ellabs_core::runtime::{certify_trajectory, ClosedLoop, ConcreteController, NoisePolicy};
use ellabs_core::synthesis::AffineController;
use nalgebra::{dvector, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn built() -> &'static BuildOutcome {
    static OUT: OnceLock<BuildOutcome> = OnceLock::new();
    OUT.get_or_init(|| build_abstraction(&benchmark_2d(), &benchmark_2d_params(0, 100), &mut BarrierSolver::default()).unwrap())
}

#[test]
fn uniform_sampling_passes_chi_square() {
    let b = Hyperrectangle::new(dvector![-4.0, -4.0], dvector![8.0, 8.0]).unwrap();
    let init = Hyperrectangle::new(dvector![-10.0, -10.0], dvector![0.25, 0.25]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (bins, n) = (10usize, 20_000usize);
    let mut counts = vec![0usize; bins * bins];
    for _ in 0..n {
        let x = sample_state(&mut rng, &b, &init, 0.0);
        assert!(b.contains(&x));
        let i = (((x[0] + 12.0) / 16.0 * bins as f64) as usize).min(bins - 1);
        let j = (((x[1] + 12.0) / 16.0 * bins as f64) as usize).min(bins - 1);
        counts[i * bins + j] += 1;
    }
    let expected = n as f64 / (bins * bins) as f64;
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - expected).powi(2) / expected).sum();
    // 99 degrees of freedom, upper 0.1% point.
    assert!(chi2 < 148.2, "chi^2 = {chi2}");

    let mut hits = 0;
    for _ in 0..10_000 {
        let x = sample_state(&mut rng, &b, &init, 0.3);
        if init.contains(&x) {
            hits += 1;
        }
    }
    // P(in X_I) = 0.3 + 0.7 * (0.5 * 0.5) / (16 * 16).
    let p: f64 = 0.3 + 0.7 * 0.25 / 256.0;
    let sd = (p * (1.0 - p) * 10_000.0).sqrt();
    assert!((hits as f64 - p * 10_000.0).abs() < 4.0 * sd, "{hits}");
}

fn law() -> AffineController {
    AffineController {
        gain: DMatrix::zeros(1, 1),
        offset: dvector![0.0],
        center: dvector![0.0],
    }
}

/// Cheapest cost from `id` to `root` over simple paths, by enumeration.
fn brute_force(abs: &Abstraction, id: usize, seen: &mut Vec<bool>) -> f64 {
    if id == abs.root() {
        return 0.0;
    }
    seen[id] = true;
    let mut best = f64::INFINITY;
    for (_, t) in abs.outgoing(id) {
        if !seen[t.target] {
            best = best.min(t.cost + brute_force(abs, t.target, seen));
        }
    }
    seen[id] = false;
    best
}

#[test]
fn value_table_matches_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for _ in 0..200 {
        let n = rng.random_range(1..=10);
        let mut abs = Abstraction::new(Ellipsoid::ball(dvector![0.0], 1.0).unwrap());
        for i in 1..n {
            let target = rng.random_range(0..i);
            let cost = rng.random_range(0.0..10.0);
            abs.insert(Ellipsoid::ball(dvector![i as f64 * 3.0], 1.0).unwrap(), target, law(), cost);
        }
        // Extra edges, cycles included.
        for _ in 0..if n > 1 { rng.random_range(0..2 * n) } else { 0 } {
            let source = rng.random_range(1..n);
            abs.add_transition(AbstractTransition {
                source,
                target: rng.random_range(0..n),
                controller: law(),
                cost: rng.random_range(0.0..10.0),
            });
        }
        let v = value_function(&abs).unwrap();
        for id in 0..n {
            let brute = brute_force(&abs, id, &mut vec![false; n]);
            assert!((v.value(id) - brute).abs() <= 1e-12 * brute.max(1.0), "state {id}: {} vs {brute}", v.value(id));
            if let Some(k) = v.best_transition(id) {
                let t = &abs.transitions()[k];
                assert_eq!(t.source, id);
                assert!((t.cost + v.value(t.target) - v.value(id)).abs() <= 1e-9);
            } else {
                assert_eq!(id, abs.root());
            }
        }
    }
}

#[test]
fn benchmark_covers_initial_set() {
    let out = built();
    assert_eq!(out.status, BuildStatus::Covered);
    let first = out.first_cover.as_ref().unwrap();
    assert!(first
        .abstraction
        .states()
        .iter()
        .any(|s| ellipsoid_inclusion(&out.spec.xi_i, &s.cell).unwrap()));
    // Improvement only adds states and edges, and never raises a value.
    let n = first.abstraction.len();
    assert!(out.abstraction.len() >= n);
    for id in 0..n {
        assert!(out.values.value(id) <= first.values.value(id) + 1e-9);
    }
}

fn p_obstacle() -> Hyperrectangle {
    benchmark_2d().spec.obstacles[0].clone()
}

#[test]
fn cells_are_safe() {
    let out = built();
    let state_box = &benchmark_2d().spec.state_box;
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for s in out.abstraction.states() {
        for o in &out.spec.xi_o {
            assert!(ellipsoids_disjoint(&s.cell, o).unwrap(), "cell {} meets an obstacle", s.id);
        }
        if s.id == out.abstraction.root() {
            continue;
        }
        let bb = s.cell.bounding_box();
        for i in 0..2 {
            assert!(bb.lower()[i] >= state_box.lower()[i] - 1e-9 && bb.upper()[i] <= state_box.upper()[i] + 1e-9);
        }
        for _ in 0..200 {
            let x = s.cell.sample_uniform(&mut rng);
            assert!(!p_obstacle().contains(&x));
        }
    }
}

#[test]
fn every_state_reaches_the_root() {
    let out = built();
    let abs = &out.abstraction;
    // One insertion edge per non-root state, plus accepted rewires.
    assert_eq!(abs.transitions().len(), abs.len() - 1 + out.stats.rewires_accepted);
    for s in abs.states() {
        let mut id = s.id;
        let mut hops = 0;
        while id != abs.root() {
            let k = out.values.best_transition(id).unwrap();
            let next = abs.transitions()[k].target;
            assert!(out.values.value(next) < out.values.value(id));
            id = next;
            hops += 1;
            assert!(hops <= abs.len());
        }
    }
}

#[test]
fn transitions_are_sound_on_samples() {
    let out = built();
    let p = benchmark_2d();
    let abs = &out.abstraction;
    for (k, t) in abs.transitions().iter().enumerate() {
        let src = &abs.states()[t.source].cell;
        let dst = &abs.states()[t.target].cell;
        let s = sample_transition(&p.context, src, &t.controller, dst, 100, 2, k as u64);
        assert_eq!(s.violations, 0, "transition {k}: worst form {}", s.worst_target_form);
        assert!(s.worst_input_norm <= 1.0 + 1e-6, "transition {k}: input {}", s.worst_input_norm);
        assert!(s.worst_cost <= t.cost * (1.0 + 1e-6) + 1e-6, "transition {k}: cost {} > {}", s.worst_cost, t.cost);
    }
}

#[test]
fn first_cover_does_not_depend_on_the_improvement_budget() {
    let mut solver = BarrierSolver::default();
    let a = build_abstraction(&benchmark_2d(), &benchmark_2d_params(0, 0), &mut solver).unwrap();
    let b = build_abstraction(&benchmark_2d(), &benchmark_2d_params(0, 0), &mut BarrierSolver::default()).unwrap();
    assert_eq!(a, b);
    let full = built().first_cover.as_ref().unwrap();
    assert_eq!(&a.abstraction, &full.abstraction);
    assert_eq!(a.first_cover.unwrap().iteration, full.iteration);
}

#[test]
fn closed_loop_meets_the_value_bound() {
    let out = built();
    let p = benchmark_2d();
    let controller = ConcreteController::new(out.abstraction.clone(), out.values.clone());
    let noise = ellabs_core::geometry::VPolytope::from_box(&dvector![0.01, 0.01]).unwrap();
    let lp = ClosedLoop {
        system: &p.context.system,
        controller: &controller,
        cost: &p.context.cost,
        disturbances: &noise,
        target: &p.spec.target,
    };
    let x0 = dvector![-10.0, -10.0];
    let bound = controller.refine_value(&x0).unwrap();
    let mut policies: Vec<NoisePolicy> = (0..20).map(|seed| NoisePolicy::Uniform { seed }).collect();
    policies.push(NoisePolicy::Zero);
    policies.push(NoisePolicy::VertexCycling);
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for noise in policies {
        // Random starts inside the initial box as well as its centre.
        for start in [x0.clone(), p.spec.initial.sample_uniform(&mut rng)] {
            let t = lp.simulate(&start, noise, 200).unwrap();
            assert!(certify_trajectory(&t, &controller).passed());
            let v0 = controller.refine_value(&start).unwrap();
            assert!(t.total_cost() <= v0 + 1e-6, "{} > {v0}", t.total_cost());
            assert!(p.spec.target.contains(t.states.last().unwrap()));
            for (k, x) in t.states[..t.steps()].iter().enumerate() {
                assert!(controller.abstraction().states()[t.cells[k]].cell.quad_form(x) <= 1.0 + 1e-9);
                assert!(!p.spec.obstacles[0].contains(x));
            }
        }
    }
    assert!(bound.is_finite());
}
