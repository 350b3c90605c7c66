//! Invariant checks returning a description of the first violation. The core test suite
//! drives them through `proptest!`, the acceptance run through a fixed-seed runner.

use std::sync::Arc;

use proptest::prelude::*;

use dpgeo_core::dp_solver::{dp_distance, DpOptions};
use dpgeo_core::grid_manifold::{p_energy, DiscreteField, GridManifold, GridSpec};
use dpgeo_core::metric_compare::{
    dp_close_check, gh_lower_bound, gh_upper_bound, gh_upper_bound_exact, probe_radii, sample_space, DistanceMode,
    FiniteMetricSpace,
};

use crate::instances::{TinyInstance, TinyMetric};

pub type PropResult = Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> PropResult {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn dp(g: &GridManifold, a: usize, b: usize, p: f64) -> Result<f64, String> {
    dp_distance(g, a, b, p, &DpOptions::default()).map(|r| r.value).map_err(|e| e.to_string())
}

/// `d(a, a) = 0`, symmetry and the triangle inequality, each to 1e-6 relative.
pub fn dp_pseudometric(inst: &TinyInstance) -> PropResult {
    let g = inst.grid();
    let [a, b, c] = inst.points(&g);
    let p = inst.p;
    ensure(dp(&g, a, a, p)? == 0.0, || "d(a, a) != 0".into())?;
    let (ab, ba, bc, ac) = (dp(&g, a, b, p)?, dp(&g, b, a, p)?, dp(&g, b, c, p)?, dp(&g, a, c, p)?);
    ensure((ab - ba).abs() <= 1e-6 * ab.max(ba), || format!("asymmetric: {ab} vs {ba}"))?;
    ensure(ac <= (ab + bc) * (1.0 + 1e-6), || format!("triangle: d(a,c) = {ac} > {ab} + {bc}"))
}

/// The metric `rho^{-2} g` scales `d_p` by `rho^{n/p - 1}`. Only meaningful where no
/// eigenvalue is clamped, so callers pass smooth instances and `rho <= 1`.
pub fn dp_scaling(inst: &TinyInstance, rho: f64) -> PropResult {
    let g = inst.grid();
    let [a, b, _] = inst.points(&g);
    let d1 = dp(&g, a, b, inst.p)?;
    let d2 = dp(&g.rescaled(rho).map_err(|e| e.to_string())?, a, b, inst.p)?;
    let expect = d1 * rho.powf(g.dim as f64 / inst.p - 1.0);
    ensure((d2 - expect).abs() <= 1e-6 * expect, || format!("rescaled d_p {d2}, expected {expect}"))
}

/// Enlarging the domain (same metric, same spacing) can only lower `d_p`.
pub fn dp_domain_monotone(coeffs: [f64; 6], cells: usize, picks: [f64; 2], p: f64) -> PropResult {
    let inst = TinyInstance { cells: vec![cells, cells], periodic: false, metric: TinyMetric::Smooth(coeffs), p, picks: [picks[0], picks[1], 0.5] };
    let small = inst.grid();
    let spec = GridSpec::new(vec![2 * cells, 2 * cells], vec![-0.5, -0.5], vec![1.5, 1.5], vec![false, false]);
    let metric = crate::instances::smooth_metric_fn(coeffs, 2);
    let big = GridManifold::from_fn(&spec, Arc::new(metric)).map_err(|e| e.to_string())?;
    let [a, b, _] = inst.points(&small);
    let lift = |v: usize| big.nearest_vertex(&small.vertex_coords(v));
    let (ds, db) = (dp(&small, a, b, p)?, dp(&big, lift(a), lift(b), p)?);
    ensure(db <= ds * (1.0 + 1e-6), || format!("d_p on the larger domain {db} exceeds {ds}"))
}

/// `E(lambda f) = |lambda|^p E(f)` and `E((f + h)/2) <= (E(f) + E(h))/2`.
pub fn energy_homogeneous_convex(inst: &TinyInstance, f: &[f64], h: &[f64], lambda: f64) -> PropResult {
    let g = inst.grid();
    let nv = g.num_vertices();
    let e = |v: Vec<f64>| p_energy(&g, &DiscreteField::new(v), inst.p).map_err(|e| e.to_string());
    let (f, h) = (f[..nv].to_vec(), h[..nv].to_vec());
    let ef = e(f.clone())?;
    let eh = e(h.clone())?;
    let scaled = e(f.iter().map(|v| lambda * v).collect())?;
    let expect = lambda.abs().powf(inst.p) * ef;
    ensure((scaled - expect).abs() <= 1e-10 * expect.max(1e-300), || format!("E(lambda f) = {scaled}, expected {expect}"))?;
    let mid = e(f.iter().zip(&h).map(|(a, b)| 0.5 * (a + b)).collect())?;
    ensure(mid <= 0.5 * (ef + eh) * (1.0 + 1e-12) + 1e-300, || format!("E(mid) = {mid} > mean {}", 0.5 * (ef + eh)))
}

/// Lower bound below the upper bound; the exact upper bound is symmetric and satisfies the
/// triangle inequality on equal sizes.
pub fn gh_bounds(x: &FiniteMetricSpace, y: &FiniteMetricSpace, z: &FiniteMetricSpace) -> PropResult {
    let up = |a: &FiniteMetricSpace, b: &FiniteMetricSpace| gh_upper_bound(a, b).map(|g| g.value).map_err(|e| e.to_string());
    for (a, b) in [(x, y), (y, z), (x, z)] {
        let (lo, hi) = (gh_lower_bound(a, b), up(a, b)?);
        ensure(lo <= hi + 1e-12, || format!("lower {lo} > upper {hi} for sizes {} and {}", a.len(), b.len()))?;
    }
    if x.len() == y.len() && y.len() == z.len() {
        let ex = |a: &FiniteMetricSpace, b: &FiniteMetricSpace| gh_upper_bound_exact(a, b).map(|g| g.value).map_err(|e| e.to_string());
        let (xy, yx) = (ex(x, y)?, ex(y, x)?);
        ensure((xy - yx).abs() <= 1e-12, || format!("asymmetric exact bound {xy} vs {yx}"))?;
        let (yz, xz) = (ex(y, z)?, ex(x, z)?);
        ensure(xz <= xy + yz + 1e-9, || format!("triangle: {xz} > {xy} + {yz}"))?;
    }
    Ok(())
}

/// A space is d_p-close to itself at every tolerance.
pub fn close_check_reflexive(x: &FiniteMetricSpace, eps: f64) -> PropResult {
    let vols: Vec<Vec<f64>> = (0..x.len()).map(|i| probe_radii(eps).iter().map(|r| r * (i + 1) as f64).collect()).collect();
    let rep = dp_close_check(x, x, eps, &vols, &vols).map_err(|e| e.to_string())?;
    ensure(rep.pass && rep.worst_pair_gap == 0.0 && rep.worst_volume_ratio == 1.0, || format!("{rep:?}"))
}

/// Same inputs, same bits: d_p solves and seeded sampling.
pub fn deterministic(inst: &TinyInstance, seed: u64) -> PropResult {
    let g = inst.grid();
    let [a, b, _] = inst.points(&g);
    let r1 = dp_distance(&g, a, b, inst.p, &DpOptions::default()).map_err(|e| e.to_string())?;
    let r2 = dp_distance(&g, a, b, inst.p, &DpOptions::default()).map_err(|e| e.to_string())?;
    ensure(r1.value.to_bits() == r2.value.to_bits() && r1.potential == r2.potential, || "d_p solve not reproducible".into())?;
    let mode = DistanceMode::Dp { p: inst.p };
    let s1 = sample_space(&g, 3, mode, seed).map_err(|e| e.to_string())?;
    let s2 = sample_space(&g, 3, mode, seed).map_err(|e| e.to_string())?;
    ensure(s1 == s2, || "sample_space not reproducible".into())
}

/// Vertex values in `[-1, 1]`, long enough for any tiny instance.
pub fn field() -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(-1.0..1.0f64, crate::instances::TINY_MAX_VERTICES)
}
