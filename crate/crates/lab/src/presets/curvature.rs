use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use dpgeo_core::grid_manifold::{discretize_strip_metric, lq_scalar_norm, GridManifold, Strip, StripBase};
use dpgeo_core::warped_metrics::{min_scalar_report, BuildingBlockParams, ConeOnset, CurvatureReport, ProfilePair};

use super::{row, schema_err, Outcome, Table};
use crate::LabResult;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildingBlockCurvatureParams {
    pub n: usize,
    pub deltas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub cone_gain: f64,
    pub onset: ConeOnset,
    pub r_max: f64,
    pub samples: usize,
    /// A pair qualifies when min R over `(0, r_max]` is at least this.
    pub min_r_floor: f64,
    /// ... and `delta <= max_delta`, `eps <= max_eps`.
    pub max_delta: f64,
    pub max_eps: f64,
}

impl Default for BuildingBlockCurvatureParams {
    fn default() -> Self {
        BuildingBlockCurvatureParams {
            n: 3,
            deltas: vec![3e-5, 1e-5, 3e-6, 1e-6, 3e-7, 1e-7, 3e-8, 1e-8],
            epsilons: vec![1e-3, 1e-4],
            cone_gain: dpgeo_core::warped_metrics::DEFAULT_CONE_GAIN,
            onset: ConeOnset::Inner,
            r_max: 10.0,
            samples: 4000,
            min_r_floor: -0.1,
            max_delta: 1e-3,
            max_eps: 1e-3,
        }
    }
}

/// Relative slack for "R >= 0" where the metric is exactly flat.
const FLAT_ROUNDOFF: f64 = 1e-12;

struct Verdict {
    min_ok: bool,
    inner_ok: bool,
    middle_ok: bool,
}

fn judge(par: &BuildingBlockCurvatureParams, rep: &CurvatureReport) -> Verdict {
    let scale = rep.samples.iter().map(|s| s.scalar.abs()).fold(1.0, f64::max);
    Verdict {
        min_ok: rep.min_r >= par.min_r_floor,
        inner_ok: rep.inner.map_or(true, |m| m.min >= -FLAT_ROUNDOFF * scale),
        middle_ok: rep.middle.map_or(false, |m| m.min > 0.0),
    }
}

pub fn building_block(par: &BuildingBlockCurvatureParams) -> LabResult<Outcome> {
    if par.deltas.is_empty() || par.epsilons.is_empty() {
        return Err(schema_err("deltas and epsilons must be nonempty"));
    }
    let jobs: Vec<(f64, f64)> = par.deltas.iter().flat_map(|&d| par.epsilons.iter().map(move |&e| (d, e))).collect();
    // A pair outside the constructible range is reported, not fatal.
    let reports: Vec<Result<CurvatureReport, String>> = jobs
        .par_iter()
        .map(|&(delta, eps)| {
            BuildingBlockParams::new(par.n, delta, eps)
                .and_then(|b| b.with_gain(par.cone_gain))
                .map(|b| b.with_onset(par.onset))
                .and_then(|b| min_scalar_report(&b, par.r_max, par.samples))
                .map_err(|e| e.to_string())
        })
        .collect();

    let mut out = Outcome::new(par);
    let mut sweep = Table::new(
        "sweep",
        &["delta", "epsilon", "sigma0", "min_r", "min_at", "inner_min", "middle_min", "outer_min", "qualifies", "error"],
    );
    let mut chosen: Option<(f64, f64, &CurvatureReport)> = None;
    let mut any_built = false;
    for (&(delta, eps), rep) in jobs.iter().zip(&reports) {
        let sigma0 = par.cone_gain * par.n as f64 * delta;
        match rep {
            Ok(rep) => {
                any_built = true;
                let v = judge(par, rep);
                let qualifies = v.min_ok && v.inner_ok && v.middle_ok && delta <= par.max_delta && eps <= par.max_eps;
                let at = rep.samples.iter().find(|s| s.scalar == rep.min_r).map_or(f64::NAN, |s| s.r);
                let fmt = |m: Option<dpgeo_core::warped_metrics::RegionMin>| m.map_or(String::new(), |m| m.min.to_string());
                sweep.push(row![delta, eps, sigma0, rep.min_r, at, fmt(rep.inner), fmt(rep.middle), fmt(rep.outer), qualifies, ""]);
                if qualifies && chosen.is_none() {
                    chosen = Some((delta, eps, rep));
                }
            }
            Err(e) => sweep.push(row![delta, eps, sigma0, "", "", "", "", "", false, e]),
        }
    }
    if !any_built {
        return Err(schema_err("no (delta, eps) pair in the sweep is constructible with this cone gain"));
    }

    let shown = chosen.or_else(|| jobs.iter().zip(&reports).find_map(|(&(d, e), r)| r.as_ref().ok().map(|r| (d, e, r))));
    if let Some((delta, eps, rep)) = shown {
        let mut profile = Table::new("profile", &["r", "f", "f'", "f''", "phi", "phi'", "phi''", "R", "R_rr", "R_sph", "R_xx"]);
        for s in &rep.samples {
            profile.push(row![s.r, s.f.v, s.f.d1, s.f.d2, s.phi.v, s.phi.d1, s.phi.d2, s.scalar, s.ricci.rr, s.ricci.sphere, s.ricci.xx]);
        }
        out.put("profile_pair", serde_json::json!({"delta": delta, "epsilon": eps, "min_r": rep.min_r}));
        out.tables.push(profile);
    }
    match chosen {
        Some((delta, eps, rep)) => {
            out.put("qualifying_pair", serde_json::json!({"delta": delta, "epsilon": eps}));
            out.check(
                "pair_with_min_r_above_floor",
                true,
                format!("delta = {delta:e}, eps = {eps:e}: min R = {:.4e} >= {}", rep.min_r, par.min_r_floor),
            );
            out.check(
                "nonnegative_in_case_regions",
                true,
                format!(
                    "inner min {:.3e}, middle min {:.3e}",
                    rep.inner.map_or(f64::NAN, |m| m.min),
                    rep.middle.map_or(f64::NAN, |m| m.min)
                ),
            );
        }
        None => {
            let best = reports.iter().filter_map(|r| r.as_ref().ok()).map(|r| r.min_r).fold(f64::NEG_INFINITY, f64::max);
            out.check("pair_with_min_r_above_floor", false, format!("no qualifying pair; best min R = {best:.4e}"));
            out.check("nonnegative_in_case_regions", false, "no qualifying pair");
        }
    }
    out.tables.insert(0, sweep);
    Ok(out)
}

/// Unit 2-torus with one building-block strip along the x axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StripTorus {
    pub n: usize,
    pub cone_gain: f64,
    pub r_max: f64,
    /// Tube radius in torus units.
    pub r0: f64,
    /// y coordinate of the strip axis.
    pub axis_y: f64,
    /// Cells along x (the metric is constant along the axis) and across.
    pub cells: [usize; 2],
}

impl Default for StripTorus {
    fn default() -> Self {
        StripTorus { n: 3, cone_gain: 1.0, r_max: 10.0, r0: 0.4, axis_y: 0.5, cells: [8, 2048] }
    }
}

impl StripTorus {
    pub fn grid(&self, delta: f64, eps: f64) -> dpgeo_core::Result<GridManifold> {
        let params = BuildingBlockParams::new(self.n, delta, eps)?.with_gain(self.cone_gain)?;
        let profile = ProfilePair::building_block(&params, self.r_max)?;
        let base = StripBase { lower: vec![0.0, 0.0], upper: vec![1.0, 1.0], periodic: vec![true, true] };
        let strip = Strip { axis: 0, center: vec![0.0, self.axis_y], r0: self.r0, profile };
        discretize_strip_metric(&base, &[strip], &self.cells)
    }
}

/// The (delta, eps) sweep shared by the entropy and L^q presets.
pub(crate) fn default_strip_sweep() -> (Vec<f64>, Vec<f64>) {
    (vec![0.2, 0.1, 0.05, 0.025], vec![0.2, 0.15, 0.1, 0.08])
}

pub(crate) fn sweep_pairs(deltas: &[f64], epsilons: &[f64]) -> LabResult<Vec<(f64, f64)>> {
    if deltas.len() != epsilons.len() || deltas.len() < 2 {
        return Err(schema_err("deltas and epsilons must have the same length (at least 2)"));
    }
    Ok(deltas.iter().cloned().zip(epsilons.iter().cloned()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqScalarParams {
    pub q: f64,
    pub deltas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub strip: StripTorus,
}

impl Default for LqScalarParams {
    fn default() -> Self {
        let (deltas, epsilons) = default_strip_sweep();
        LqScalarParams { q: 0.5, deltas, epsilons, strip: StripTorus::default() }
    }
}

pub fn lq_scalar(par: &LqScalarParams) -> LabResult<Outcome> {
    let pairs = sweep_pairs(&par.deltas, &par.epsilons)?;
    let rows: Vec<(f64, f64, f64)> = pairs
        .par_iter()
        .map(|&(d, e)| {
            let grid = par.strip.grid(d, e)?;
            let (r, ok) = grid.scalar_field();
            let min_r = r.values.iter().zip(&ok).filter(|(_, ok)| **ok).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
            Ok((lq_scalar_norm(&grid, par.q)?, min_r, grid.total_volume()))
        })
        .collect::<dpgeo_core::Result<_>>()?;
    let mut out = Outcome::new(par);
    let mut table = Table::new("sweep", &["delta", "epsilon", "lq_norm", "min_r", "volume"]);
    for (&(d, e), (norm, min_r, vol)) in pairs.iter().zip(&rows) {
        table.push(row![d, e, norm, min_r, vol]);
    }
    let norms: Vec<f64> = rows.iter().map(|r| r.0).collect();
    out.check(
        "lq_norm_decreasing",
        norms.windows(2).all(|w| w[1] < w[0]),
        format!("volume average of |R|^{} along the sweep: {norms:?}", par.q),
    );
    out.put("lq_norms", &norms);
    out.tables = vec![table];
    Ok(out)
}
