//! Oracles written independently of `dpgeo-core` (finite-difference Riemann contraction) and
//! random tiny instances, shared by the core integration tests and the acceptance run.

pub mod curvature;
pub mod instances;
pub mod props;

use proptest::strategy::{Strategy, ValueTree};
use proptest::test_runner::TestRunner;

/// `count` values drawn from `strategy` with the fixed-seed runner.
pub fn deterministic_samples<S: Strategy>(strategy: &S, count: usize) -> Vec<S::Value> {
    let mut runner = TestRunner::deterministic();
    (0..count).map(|_| strategy.new_tree(&mut runner).expect("strategy generates").current()).collect()
}
