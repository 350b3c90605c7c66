use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dpgeo_core::dp_solver::{dp_distance, DpOptions, DpSolveResult};
use dpgeo_core::grid_manifold::{discretize_power, GridManifold, GridSpec};
use dpgeo_core::warped_metrics::{make_power_metric, PowerMetricParams};

use super::{log_log_slope, row, schema_err, Outcome, Table};
use crate::LabResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EuclidScalingParams {
    pub p: f64,
    /// The square is `[-half_width, half_width]^2`.
    pub half_width: f64,
    /// Successive doublings; Richardson extrapolation uses each resolution and the previous one.
    pub cells: Vec<usize>,
    pub distances: Vec<f64>,
    /// Resolution at which the slope must be within `tolerance`; the next one must improve on it.
    pub check_cells: usize,
    pub tolerance: f64,
    pub dp: DpOptions,
}

impl Default for EuclidScalingParams {
    fn default() -> Self {
        EuclidScalingParams {
            p: 3.0,
            half_width: 2.0,
            cells: vec![64, 128, 256],
            distances: vec![0.25, 0.5, 1.0],
            check_cells: 128,
            tolerance: 0.05,
            dp: DpOptions::default(),
        }
    }
}

/// Two points on the x axis at distance `s`, centered.
fn euclid_pair(grid: &GridManifold, s: f64) -> (usize, usize) {
    (grid.nearest_vertex(&[-s / 2.0, 0.0]), grid.nearest_vertex(&[s / 2.0, 0.0]))
}

pub fn euclid_scaling(par: &EuclidScalingParams) -> LabResult<Outcome> {
    const DIM: f64 = 2.0;
    if par.cells.is_empty() || par.cells.windows(2).any(|w| w[1] != 2 * w[0]) {
        return Err(schema_err("cells must be a nonempty list of successive doublings"));
    }
    if par.distances.len() < 2 || par.distances.iter().any(|&s| !(s > 0.0 && s < par.half_width)) {
        return Err(schema_err("need at least two distances inside the square"));
    }
    if !(par.p > DIM) {
        return Err(schema_err(format!("p = {} must exceed the dimension 2", par.p)));
    }
    let target = 1.0 - DIM / par.p;
    let beta = (par.p - DIM) / (par.p - 1.0);

    let mut out = Outcome::new(par);
    let mut solves = Table::new("solves", &["cells", "distance", "grid_distance", "d_p", "iterations", "converged", "estimated_s"]);
    let mut raw: Vec<Vec<f64>> = Vec::new();
    for &n in &par.cells {
        let grid = GridManifold::flat(&GridSpec::cube(2, n, -par.half_width, par.half_width))?;
        let results: Vec<(f64, DpSolveResult)> = par
            .distances
            .par_iter()
            .map(|&s| {
                let (a, b) = euclid_pair(&grid, s);
                let sep = grid.displacement(&grid.vertex_coords(a), &grid.vertex_coords(b))[0].abs();
                dp_distance(&grid, a, b, par.p, &par.dp).map(|r| (sep, r))
            })
            .collect::<Result<_, _>>()?;
        let mut row_d = Vec::new();
        for (s, (sep, r)) in par.distances.iter().zip(&results) {
            out.not_converged(r.converged, format!("cells={n} distance={s}"));
            solves.push(row![n, s, sep, r.value, r.iterations, r.converged, r.estimated_s.map_or(String::new(), |v| v.to_string())]);
            row_d.push(r.value);
        }
        raw.push(row_d);
    }

    let mut slopes = Table::new("slopes", &["cells", "raw_slope", "raw_rel_error", "richardson_slope", "richardson_rel_error"]);
    let mut rel = Vec::new();
    for (k, &n) in par.cells.iter().enumerate() {
        let raw_slope = log_log_slope(&par.distances, &raw[k]);
        let rich = (k > 0).then(|| {
            let d: Vec<f64> = raw[k].iter().zip(&raw[k - 1]).map(|(f, c)| f + (f - c) / (2f64.powf(beta) - 1.0)).collect();
            log_log_slope(&par.distances, &d)
        });
        let re = |v: f64| (v - target).abs() / target;
        slopes.push(row![n, raw_slope, re(raw_slope), rich.map_or(String::new(), |v| v.to_string()), rich.map_or(String::new(), |v| re(v).to_string())]);
        rel.push((n, raw_slope, re(raw_slope), rich, rich.map(re)));
    }
    out.put("target_slope", target);
    out.put("singular_exponent", beta);
    out.put(
        "slopes",
        rel.iter()
            .map(|(n, s, e, r, re)| serde_json::json!({"cells": n, "raw": s, "raw_rel_error": e, "richardson": r, "richardson_rel_error": re}))
            .collect::<Vec<_>>(),
    );

    let at = par.cells.iter().position(|&n| n == par.check_cells);
    match at.and_then(|k| rel[k].4.map(|e| (k, e))) {
        Some((k, e)) => {
            out.check(
                "slope_within_tolerance",
                e <= par.tolerance,
                format!("Richardson slope {:.4} at {}^2, relative error {:.4} (raw slope {:.4})", rel[k].3.unwrap(), par.check_cells, e, rel[k].1),
            );
            match rel.get(k + 1) {
                Some(next) => {
                    let fine = next.4.unwrap();
                    out.check(
                        "trend_improving",
                        fine < e && next.2 < rel[k].2,
                        format!("relative error {:.4} -> {:.4} (raw {:.4} -> {:.4}) at {}^2", e, fine, rel[k].2, next.2, next.0),
                    );
                }
                None => out.check("trend_improving", false, "no finer resolution in cells"),
            }
        }
        None => out.check("slope_within_tolerance", false, format!("check_cells {} needs a coarser neighbour in cells", par.check_cells)),
    }
    out.tables = vec![solves, slopes];
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerDegeneracyParams {
    pub p: f64,
    pub alphas: Vec<f64>,
    /// Cells per side of `[-1, 1]^2`; even, so that x = 0 is a vertex line.
    pub cells: Vec<usize>,
    /// The two points are `(0, -separation/2)` and `(0, separation/2)`.
    pub separation: f64,
    /// For `alpha p >= 1`: every refinement must shrink d_p by at least this fraction.
    pub min_decrease: f64,
    /// For `alpha p < 1`: the last refinement may change d_p by at most this fraction.
    pub max_change: f64,
    pub dp: DpOptions,
}

impl Default for PowerDegeneracyParams {
    fn default() -> Self {
        PowerDegeneracyParams {
            p: 3.0,
            alphas: vec![0.5, 0.1],
            cells: vec![32, 64, 128, 256],
            separation: 1.0,
            min_decrease: 0.25,
            max_change: 0.05,
            dp: DpOptions::default(),
        }
    }
}

pub fn power_degeneracy(par: &PowerDegeneracyParams) -> LabResult<Outcome> {
    if par.cells.len() < 2 || par.cells.iter().any(|n| n % 2 != 0) {
        return Err(schema_err("cells must list at least two even resolutions"));
    }
    if !(par.separation > 0.0 && par.separation < 2.0) {
        return Err(schema_err("separation must lie in (0, 2)"));
    }
    let mut out = Outcome::new(par);
    let mut table = Table::new("solves", &["alpha", "alpha_p", "cells", "d_p", "ratio_to_previous", "iterations", "converged", "degenerate_endpoint"]);
    let jobs: Vec<(f64, usize)> = par.alphas.iter().flat_map(|&a| par.cells.iter().map(move |&n| (a, n))).collect();
    let results: Vec<DpSolveResult> = jobs
        .par_iter()
        .map(|&(alpha, n)| {
            let metric = make_power_metric(PowerMetricParams { alpha })?;
            let grid = discretize_power(metric, [-1.0, -1.0], [1.0, 1.0], [n, n])?;
            let a = grid.nearest_vertex(&[0.0, -par.separation / 2.0]);
            let b = grid.nearest_vertex(&[0.0, par.separation / 2.0]);
            dp_distance(&grid, a, b, par.p, &par.dp)
        })
        .collect::<Result<_, _>>()?;

    let mut per_alpha = Vec::new();
    for (ai, &alpha) in par.alphas.iter().enumerate() {
        let rs = &results[ai * par.cells.len()..(ai + 1) * par.cells.len()];
        let values: Vec<f64> = rs.iter().map(|r| r.value).collect();
        for (k, (r, &n)) in rs.iter().zip(&par.cells).enumerate() {
            out.not_converged(r.converged, format!("alpha={alpha} cells={n}"));
            let ratio = if k > 0 { (values[k] / values[k - 1]).to_string() } else { String::new() };
            table.push(row![alpha, alpha * par.p, n, r.value, ratio, r.iterations, r.converged, r.degenerate_endpoint]);
        }
        let ratios: Vec<f64> = values.windows(2).map(|w| w[1] / w[0]).collect();
        let name = format!("alpha={alpha}");
        if alpha * par.p >= 1.0 {
            let worst = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            out.check(
                &format!("{name}: d_p shrinks by >= {} per doubling", par.min_decrease),
                worst <= 1.0 - par.min_decrease,
                format!("ratios {ratios:.4?}"),
            );
        } else {
            let last = (ratios.last().unwrap() - 1.0).abs();
            out.check(
                &format!("{name}: last doubling changes d_p by <= {}", par.max_change),
                last <= par.max_change,
                format!("relative change {last:.4}; ratios {ratios:.4?}"),
            );
        }
        per_alpha.push(serde_json::json!({"alpha": alpha, "alpha_p": alpha * par.p, "d_p": values, "ratios": ratios}));
    }
    out.put("sweep", per_alpha);
    out.tables = vec![table];
    Ok(out)
}
