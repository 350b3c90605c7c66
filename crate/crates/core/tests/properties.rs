//! Invariants of the d_p distance, the p-energy and the Gromov–Hausdorff bounds.

use dpgeo_testkit::instances::{finite_space, smooth_instance, tiny_instance, P_VALUES};
use dpgeo_testkit::props;
use proptest::prelude::*;

fn check(r: props::PropResult) -> Result<(), TestCaseError> {
    r.map_err(TestCaseError::fail)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dp_is_a_pseudometric(inst in tiny_instance()) {
        check(props::dp_pseudometric(&inst))?;
    }

    #[test]
    fn dp_scales_with_the_metric(inst in smooth_instance(), rho in 0.25..1.0f64) {
        check(props::dp_scaling(&inst, rho))?;
    }

    #[test]
    fn dp_decreases_on_larger_domains(
        coeffs in proptest::array::uniform6(-1.0..1.0f64),
        cells in prop_oneof![Just(4usize), Just(6usize)],
        picks in proptest::array::uniform2(0.0..1.0f64),
        p in proptest::sample::select(P_VALUES.to_vec()),
    ) {
        check(props::dp_domain_monotone(coeffs, cells, picks, p))?;
    }

    #[test]
    fn energy_is_homogeneous_and_convex(inst in tiny_instance(), f in props::field(), h in props::field(), lambda in -3.0..3.0f64) {
        check(props::energy_homogeneous_convex(&inst, &f, &h, lambda))?;
    }

    #[test]
    fn dp_is_deterministic(inst in tiny_instance(), seed in any::<u64>()) {
        check(props::deterministic(&inst, seed))?;
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gh_bounds_are_ordered_on_equal_sizes(
        x in finite_space(2, 6, false),
        y in finite_space(2, 6, true),
        z in finite_space(2, 6, false),
    ) {
        let k = x.len().min(y.len()).min(z.len());
        let cut = |s: &dpgeo_core::metric_compare::FiniteMetricSpace| {
            let dist = s.dist[..k].iter().map(|row| row[..k].to_vec()).collect();
            dpgeo_core::metric_compare::FiniteMetricSpace::new(s.points[..k].to_vec(), dist, vec![1.0; k]).unwrap()
        };
        check(props::gh_bounds(&cut(&x), &cut(&y), &cut(&z)))?;
    }

    #[test]
    fn gh_bounds_are_ordered_on_unequal_sizes(x in finite_space(1, 5, false), y in finite_space(4, 10, true), z in finite_space(2, 7, false)) {
        check(props::gh_bounds(&x, &y, &z))?;
    }

    #[test]
    fn close_check_is_reflexive(x in finite_space(1, 8, false), eps in 1e-3..1.0f64) {
        check(props::close_check_reflexive(&x, eps))?;
    }
}
