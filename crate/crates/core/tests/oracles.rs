//! Core routines against oracles computed another way: the closed-form scalar curvature
//! against a finite-difference Riemann contraction, and the d_p solver against the direct
//! maximization of the sup formulation.

use dpgeo_core::dp_solver::{brute_force_dp, dp_distance, DpOptions};
use dpgeo_core::warped_metrics::{scalar_from_jets, Jet};
use dpgeo_testkit::curvature::{angles, direction, fd_scalar_curvature, stereographic_sphere, warped_metric, warped_profile, WarpedProfile};
use dpgeo_testkit::deterministic_samples;
use dpgeo_testkit::instances::{tiny_instance, TINY_MAX_VERTICES};
use proptest::prelude::*;

const FD_STEP: f64 = 1e-3;

#[test]
fn fd_contraction_reproduces_round_spheres() {
    for (dim, rho) in [(2, 1.0), (3, 0.7), (4, 2.0)] {
        let x: Vec<f64> = (0..dim).map(|i| 0.1 * (i as f64 + 1.0)).collect();
        let r = fd_scalar_curvature(&stereographic_sphere(dim, rho), &x, FD_STEP);
        let exact = (dim * (dim - 1)) as f64 / (rho * rho);
        assert!((r - exact).abs() < 1e-5 * exact, "dim {dim}: {r} vs {exact}");
    }
}

#[test]
fn warped_sphere_times_line() {
    // f = sin r over S^{n-1} is the unit n-sphere; the product with a line has R = n (n - 1)
    for n in [3, 4] {
        let r: f64 = 0.8;
        let f = Jet::new(r.sin(), r.cos(), -r.sin());
        let phi = Jet::new(1.0, 0.0, 0.0);
        assert!((scalar_from_jets(n, f, phi) - (n * (n - 1)) as f64).abs() < 1e-12);
    }
}

fn relative_gap(n: usize, prof: WarpedProfile, r: f64, (theta, psi): (f64, f64)) -> f64 {
    let closed = scalar_from_jets(n, prof.f_jet(r), prof.phi_jet(r));
    let mut x: Vec<f64> = direction(n, theta, psi).iter().map(|u| r * u).collect();
    x.push(0.3);
    let fd = fd_scalar_curvature(&warped_metric(n, prof), &x, FD_STEP);
    // Relative to max(|R|, 1): the FD truncation error scales with the metric's second
    // derivatives, not with R, so near a zero of R a pure relative error is meaningless.
    (fd - closed).abs() / closed.abs().max(1.0)
}

#[test]
fn scalar_formula_matches_fd_contraction() {
    let cases = deterministic_samples(&(warped_profile(), 0.3..2.0f64, angles(), 3..=4usize), 30);
    let mut worst = 0.0f64;
    for (prof, r, ang, n) in cases {
        let gap = relative_gap(n, prof, r, ang);
        assert!(gap <= 1e-4, "n = {n}, r = {r}, {prof:?}: relative gap {gap:e}");
        worst = worst.max(gap);
    }
    assert!(worst > 0.0);
}

#[test]
fn dp_matches_brute_force_on_tiny_instances() {
    for inst in deterministic_samples(&tiny_instance(), 12) {
        let g = inst.grid();
        assert!(g.num_vertices() <= TINY_MAX_VERTICES);
        let [a, b, _] = inst.points(&g);
        let fast = dp_distance(&g, a, b, inst.p, &DpOptions::default()).unwrap();
        let slow = brute_force_dp(&g, a, b, inst.p).unwrap();
        assert!(fast.converged);
        assert!((fast.value - slow).abs() <= 5e-3 * slow, "{inst:?}: solver {} vs oracle {slow}", fast.value);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn closed_form_tracks_fd_for_random_profiles(prof in warped_profile(), r in 0.3..2.0f64, ang in angles()) {
        prop_assert!(relative_gap(3, prof, r, ang) <= 1e-4);
    }
}
