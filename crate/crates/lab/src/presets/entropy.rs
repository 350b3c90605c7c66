use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dpgeo_core::entropy::{mu_entropy, EntropyOptions, EntropyResult};
use dpgeo_core::grid_manifold::{GridManifold, GridSpec};

use super::curvature::{default_strip_sweep, sweep_pairs, StripTorus};
use super::{increasing, row, schema_err, Outcome, Table};
use crate::LabResult;

/// `-log(4 pi tau)^{dim/2} + log V - dim`: W at the constant function.
pub fn constant_w(dim: f64, volume: f64, tau: f64) -> f64 {
    volume.ln() - 0.5 * dim * (4.0 * std::f64::consts::PI * tau).ln() - dim
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyFlatTorusParams {
    pub cells: usize,
    /// In sweep order; mu must increase along it.
    pub taus: Vec<f64>,
    pub mu_max: f64,
    /// Bound on the Euler-Lagrange residual relative to `||u|| = 1`.
    pub el_max: f64,
    /// Solver options; `seed` is replaced by the experiment seed.
    pub entropy: EntropyOptions,
}

impl Default for EntropyFlatTorusParams {
    fn default() -> Self {
        EntropyFlatTorusParams { cells: 64, taus: vec![0.5, 0.1, 0.02], mu_max: 1e-3, el_max: 1e-4, entropy: EntropyOptions::default() }
    }
}

fn push_result(table: &mut Table, label: &[String], r: &EntropyResult, reference: f64) {
    let mut cells = label.to_vec();
    cells.extend(row![r.mu, reference, r.el_residual, r.constraint_error, r.iterations, r.converged, r.start]);
    table.push(cells);
}

pub fn flat_torus(par: &EntropyFlatTorusParams, seed: u64) -> LabResult<Outcome> {
    if par.taus.is_empty() || par.taus.iter().any(|&t| !(t > 0.0)) {
        return Err(schema_err("taus must be positive"));
    }
    let opts = EntropyOptions { seed, ..par.entropy };
    let grid = GridManifold::flat(&GridSpec::unit_torus(2, par.cells))?;
    let results: Vec<EntropyResult> =
        par.taus.par_iter().map(|&tau| mu_entropy(&grid, tau, &opts)).collect::<Result<_, _>>()?;

    let mut out = Outcome::new(par);
    let mut table = Table::new("sweep", &["tau", "mu", "w_constant", "el_residual", "constraint_error", "iterations", "converged", "start"]);
    for (&tau, r) in par.taus.iter().zip(&results) {
        out.not_converged(r.converged, format!("tau={tau}"));
        push_result(&mut table, &row![tau], r, constant_w(2.0, 1.0, tau));
    }
    let mus: Vec<f64> = results.iter().map(|r| r.mu).collect();
    let worst_el = results.iter().map(|r| r.el_residual).fold(0.0, f64::max);
    out.check("mu_nonpositive", mus.iter().all(|&m| m <= par.mu_max), format!("mu = {mus:.5?}, bound {}", par.mu_max));
    out.check("mu_increasing_along_sweep", increasing(&mus), format!("mu = {mus:.5?}"));
    out.check("el_residual_small", worst_el <= par.el_max, format!("largest EL residual {worst_el:.3e}, bound {:.1e}", par.el_max));
    out.put("mu", &mus);
    out.tables = vec![table];
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EntropyStripSweepParams {
    pub tau: f64,
    /// Paired with `epsilons`, in sweep order (decreasing).
    pub deltas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub strip: StripTorus,
    pub entropy: EntropyOptions,
}

impl Default for EntropyStripSweepParams {
    fn default() -> Self {
        let (deltas, epsilons) = default_strip_sweep();
        // On the 8 x 2048 strip grids W stalls at round-off with EL residuals of 1e-6 to 1e-5.
        let entropy = EntropyOptions { el_tol: 1e-4, ..EntropyOptions::default() };
        EntropyStripSweepParams { tau: 0.1, deltas, epsilons, strip: StripTorus::default(), entropy }
    }
}

pub fn strip_sweep(par: &EntropyStripSweepParams, seed: u64) -> LabResult<Outcome> {
    let pairs = sweep_pairs(&par.deltas, &par.epsilons)?;
    if !(par.tau > 0.0) {
        return Err(schema_err("tau must be positive"));
    }
    let opts = EntropyOptions { seed, ..par.entropy };
    let flat = GridManifold::flat(&GridSpec { cells: par.strip.cells.to_vec(), ..GridSpec::unit_torus(2, 2) })?;
    let flat_mu = mu_entropy(&flat, par.tau, &opts)?;
    let results: Vec<EntropyResult> = pairs
        .par_iter()
        .map(|&(d, e)| par.strip.grid(d, e).and_then(|g| mu_entropy(&g, par.tau, &opts)))
        .collect::<Result<_, _>>()?;

    let mut out = Outcome::new(par);
    let mut table = Table::new(
        "sweep",
        &["delta", "epsilon", "mu", "flat_mu", "el_residual", "constraint_error", "iterations", "converged", "start"],
    );
    out.not_converged(flat_mu.converged, "flat reference");
    for (&(d, e), r) in pairs.iter().zip(&results) {
        out.not_converged(r.converged, format!("delta={d} eps={e}"));
        push_result(&mut table, &row![d, e], r, flat_mu.mu);
    }
    let mus: Vec<f64> = results.iter().map(|r| r.mu).collect();
    let gaps: Vec<f64> = mus.iter().map(|m| (m - flat_mu.mu).abs()).collect();
    out.check("mu_increasing", increasing(&mus), format!("mu = {mus:.5?}"));
    out.check(
        "approaches_flat_mu",
        gaps.windows(2).all(|w| w[1] < w[0]),
        format!("|mu - mu_flat| = {gaps:.5?}, mu_flat = {:.5}", flat_mu.mu),
    );
    out.put("mu", &mus);
    out.put("flat_mu", flat_mu.mu);
    out.tables = vec![table];
    Ok(out)
}
