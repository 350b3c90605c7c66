use serde::{Deserialize, Serialize};

use dpgeo_core::dp_solver::DpOptions;
use dpgeo_core::grid_manifold::{discretize_strip_metric, geodesic_distances, GridManifold, GridSpec, Strip, StripBase};
use dpgeo_core::metric_compare::{
    ball_volumes, dp_close_check, farthest_point_sample, gh_lower_bound, gh_upper_bound, probe_radii, space_at,
    taxicab_deviation, DistanceMode, DpCloseReport, FiniteMetricSpace, MAX_DP_POINTS,
};
use dpgeo_core::warped_metrics::{BuildingBlockParams, ProfilePair};

use super::{row, schema_err, Outcome, Table};
use crate::LabResult;

fn space_table(name: &str, s: &FiniteMetricSpace) -> Table {
    let mut header: Vec<String> = vec!["point".into()];
    header.extend((0..s.points.first().map_or(0, |p| p.len())).map(|a| format!("x{a}")));
    header.push("weight".into());
    header.extend((0..s.len()).map(|j| format!("d{j}")));
    let mut t = Table { name: name.to_string(), header, rows: Vec::new() };
    for i in 0..s.len() {
        let mut r = row![i];
        r.extend(s.points[i].iter().map(|v| v.to_string()));
        r.push(s.weights[i].to_string());
        r.extend(s.dist[i].iter().map(|v| v.to_string()));
        t.rows.push(r);
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TorusCollapseParams {
    pub p: f64,
    /// Cells per side of the unit 2-torus.
    pub cells: usize,
    /// Sweep, paired with `r0s` (and `deltas` when given), from coarse to fine.
    pub epsilons: Vec<f64>,
    pub r0s: Vec<f64>,
    /// Empty: `delta = (-ln eps)^{-1/2}` for each eps.
    pub deltas: Vec<f64>,
    pub n: usize,
    pub cone_gain: f64,
    pub r_max: f64,
    /// x coordinate of the strip axis (the strip runs along y).
    pub axis_x: f64,
    pub sample_points: usize,
    /// The first two sample points sit this many cells to the side of the axis, at y = 0 and
    /// y = 1/2; farthest-point sampling adds the rest.
    pub anchor_offset: usize,
    /// d_p balls are measured on every `probe_stride`-th vertex per axis.
    pub probe_stride: usize,
    pub eps_check: f64,
    /// Required ratio of the first to the last collapsed-circle diameter.
    pub min_diameter_ratio: f64,
    /// Run the (expensive) d_p check at every setting instead of the finest only.
    pub dp_check_all: bool,
    pub dp: DpOptions,
}

impl Default for TorusCollapseParams {
    fn default() -> Self {
        TorusCollapseParams {
            p: 3.0,
            cells: 64,
            epsilons: vec![1e-8, 1e-12, 1e-16],
            r0s: vec![0.2, 0.1, 0.05],
            deltas: Vec::new(),
            n: 3,
            cone_gain: 1.0,
            r_max: 10.0,
            axis_x: 0.5,
            sample_points: 6,
            anchor_offset: 3,
            probe_stride: 8,
            eps_check: 0.1,
            min_diameter_ratio: 3.0,
            dp_check_all: false,
            dp: DpOptions::default(),
        }
    }
}

struct Compared {
    x: FiniteMetricSpace,
    y: FiniteMetricSpace,
    report: DpCloseReport,
    gh: (f64, f64),
}

fn compare(
    g: &GridManifold,
    nodes: &[usize],
    mode: DistanceMode,
    flat: &(FiniteMetricSpace, Vec<Vec<f64>>),
    radii: &[f64],
    par: &TorusCollapseParams,
) -> dpgeo_core::Result<Compared> {
    let stride = if matches!(mode, DistanceMode::Geodesic) { 1 } else { par.probe_stride };
    let x = space_at(g, nodes, mode, &par.dp)?;
    let vx = ball_volumes(g, nodes, radii, mode, stride, &par.dp)?;
    let report = dp_close_check(&x, &flat.0, par.eps_check, &vx, &flat.1)?;
    let gh = (gh_lower_bound(&x, &flat.0), gh_upper_bound(&x, &flat.0)?.value);
    Ok(Compared { x, y: flat.0.clone(), report, gh })
}

pub fn torus_collapse(par: &TorusCollapseParams, seed: u64) -> LabResult<Outcome> {
    let m = par.epsilons.len();
    if m < 2 || par.r0s.len() != m || !(par.deltas.is_empty() || par.deltas.len() == m) {
        return Err(schema_err("epsilons, r0s (and deltas if given) must have the same length, at least 2"));
    }
    if par.sample_points < 2 || par.sample_points > MAX_DP_POINTS {
        return Err(schema_err(format!("sample_points must lie in 2..={MAX_DP_POINTS}")));
    }
    let n = par.cells;
    let h = 1.0 / n as f64;
    let flat = GridManifold::flat(&GridSpec::unit_torus(2, n))?;
    let base = StripBase { lower: vec![0.0, 0.0], upper: vec![1.0, 1.0], periodic: vec![true, true] };
    let side = par.axis_x + par.anchor_offset as f64 * h;
    let anchors = [flat.nearest_vertex(&[side, 0.0]), flat.nearest_vertex(&[side, 0.5])];
    let nodes = farthest_point_sample(&flat, par.sample_points, seed, &anchors)?;
    let radii = probe_radii(par.eps_check);
    let geo_mode = DistanceMode::Geodesic;
    let dp_mode = DistanceMode::Dp { p: par.p };
    let flat_geo = (space_at(&flat, &nodes, geo_mode, &par.dp)?, ball_volumes(&flat, &nodes, &radii, geo_mode, 1, &par.dp)?);
    let mut flat_dp: Option<(FiniteMetricSpace, Vec<Vec<f64>>)> = None;

    let mut out = Outcome::new(par);
    let mut sweep = Table::new(
        "sweep",
        &[
            "epsilon", "delta", "r0", "phi0", "collapsed_diameter", "volume", "geo_pair_gap", "geo_volume_ratio", "geo_close",
            "geo_gh_lower", "geo_gh_upper", "dp_pair_gap", "dp_volume_ratio", "dp_close", "dp_gh_lower", "dp_gh_upper",
        ],
    );
    let mut diameters = Vec::new();
    let mut last: Option<(Compared, Option<Compared>)> = None;
    for k in 0..m {
        let eps = par.epsilons[k];
        let delta = par.deltas.get(k).copied().unwrap_or_else(|| BuildingBlockParams::default_delta(eps));
        let params = BuildingBlockParams::new(par.n, delta, eps)?.with_gain(par.cone_gain)?;
        let profile = ProfilePair::building_block(&params, par.r_max)?;
        let phi0 = profile.phi.jet(0.0).v;
        let strip = Strip { axis: 1, center: vec![par.axis_x, 0.0], r0: par.r0s[k], profile };
        let g = discretize_strip_metric(&base, &[strip], &[n, n])?;
        let a = g.nearest_vertex(&[par.axis_x, 0.0]);
        let b = g.nearest_vertex(&[par.axis_x, 0.5]);
        let diam = geodesic_distances(&g, a).values[b];
        diameters.push(diam);

        let geo = compare(&g, &nodes, geo_mode, &flat_geo, &radii, par)?;
        let dp = if par.dp_check_all || k + 1 == m {
            if flat_dp.is_none() {
                flat_dp = Some((
                    space_at(&flat, &nodes, dp_mode, &par.dp)?,
                    ball_volumes(&flat, &nodes, &radii, dp_mode, par.probe_stride, &par.dp)?,
                ));
            }
            Some(compare(&g, &nodes, dp_mode, flat_dp.as_ref().unwrap(), &radii, par)?)
        } else {
            None
        };
        let opt = |c: &Option<Compared>, f: &dyn Fn(&Compared) -> String| c.as_ref().map_or(String::new(), f);
        sweep.push(row![
            eps,
            delta,
            par.r0s[k],
            phi0,
            diam,
            g.total_volume(),
            geo.report.worst_pair_gap,
            geo.report.worst_volume_ratio,
            geo.report.pass,
            geo.gh.0,
            geo.gh.1,
            opt(&dp, &|c| c.report.worst_pair_gap.to_string()),
            opt(&dp, &|c| c.report.worst_volume_ratio.to_string()),
            opt(&dp, &|c| c.report.pass.to_string()),
            opt(&dp, &|c| c.gh.0.to_string()),
            opt(&dp, &|c| c.gh.1.to_string()),
        ]);
        last = Some((geo, dp));
    }

    let ratio = diameters[0] / diameters[m - 1];
    out.put("collapsed_diameters", &diameters);
    out.put("sample_nodes", &nodes);
    out.put("probe_radii", &radii);
    out.check(
        "collapsed_diameter_shrinks",
        ratio >= par.min_diameter_ratio,
        format!("geodesic diameter of the collapsed circle {:.4e} -> {:.4e} (ratio {ratio:.2})", diameters[0], diameters[m - 1]),
    );
    let (geo, dp) = last.expect("sweep is nonempty");
    let dp = dp.expect("the finest setting always runs the d_p check");
    out.check(
        "dp_close_at_finest",
        dp.report.pass,
        format!(
            "worst pair gap {:.4e}, worst volume ratio {:.4} (eps_check {})",
            dp.report.worst_pair_gap, dp.report.worst_volume_ratio, par.eps_check
        ),
    );
    out.check(
        "geodesic_close_fails_at_finest",
        !geo.report.pass,
        format!("worst pair gap {:.4e}, worst volume ratio {:.4}", geo.report.worst_pair_gap, geo.report.worst_volume_ratio),
    );
    out.tables = vec![
        sweep,
        space_table("space_dp_strip", &dp.x),
        space_table("space_dp_flat", &dp.y),
        space_table("space_geodesic_strip", &geo.x),
        space_table("space_geodesic_flat", &geo.y),
    ];
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaxicabParams {
    pub n: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub cone_gain: f64,
    pub r_max: f64,
    /// Strips per unit length in each direction, one entry per generation.
    pub densities: Vec<usize>,
    /// Cells per strip spacing in x and y, and across the slab.
    pub cells_per_spacing: usize,
    pub layer_cells: usize,
    /// Test pair in the (x, y) plane, placed mid-slab.
    pub pair: [[f64; 2]; 2],
    pub max_deviation: f64,
}

impl Default for TaxicabParams {
    fn default() -> Self {
        TaxicabParams {
            n: 3,
            delta: 0.2,
            epsilon: 0.03,
            cone_gain: 1.0,
            r_max: 10.0,
            densities: vec![4, 8, 16],
            cells_per_spacing: 12,
            layer_cells: 12,
            pair: [[0.13, 0.07], [0.61, 0.55]],
            max_deviation: 0.15,
        }
    }
}

/// Thin periodic slab `[0,1]^2 x [0, s]` with strips along x at heights `z = 0` and along y
/// at `z = s/3`, one of each per spacing `s = 1/m`. Each strip shrinks its axis direction by
/// `phi(0)`, so distances are compared after rescaling by `1/phi(0)`.
pub fn taxicab_grid(par: &TaxicabParams, profile: &ProfilePair, m: usize) -> dpgeo_core::Result<GridManifold> {
    let s = 1.0 / m as f64;
    let base = StripBase { lower: vec![0.0; 3], upper: vec![1.0, 1.0, s], periodic: vec![true; 3] };
    let r0 = s / 6.0;
    let mut strips = Vec::with_capacity(2 * m);
    for j in 0..m {
        let c = j as f64 * s;
        strips.push(Strip { axis: 0, center: vec![0.0, c, 0.0], r0, profile: profile.clone() });
        strips.push(Strip { axis: 1, center: vec![c, 0.0, s / 3.0], r0, profile: profile.clone() });
    }
    let c = par.cells_per_spacing * m;
    discretize_strip_metric(&base, &strips, &[c, c, par.layer_cells])
}

pub fn taxicab(par: &TaxicabParams) -> LabResult<Outcome> {
    if par.densities.len() < 2 || par.densities.iter().any(|&m| m == 0) {
        return Err(schema_err("need at least two positive densities"));
    }
    let params = BuildingBlockParams::new(par.n, par.delta, par.epsilon)?.with_gain(par.cone_gain)?;
    let profile = ProfilePair::building_block(&params, par.r_max)?;
    let phi0 = profile.phi.jet(0.0).v;
    let mut out = Outcome::new(par);
    let mut table = Table::new("generations", &["density", "vertices", "geodesic", "rescaled", "l1", "deviation"]);
    let mut devs = Vec::new();
    for &m in &par.densities {
        let g = taxicab_grid(par, &profile, m)?;
        let z = 0.5 / m as f64;
        let nodes: Vec<usize> = par.pair.iter().map(|q| g.nearest_vertex(&[q[0], q[1], z])).collect();
        let space = space_at(&g, &nodes, DistanceMode::Geodesic, &DpOptions::default())?.scaled(1.0 / phi0)?;
        let dev = taxicab_deviation(&space)?;
        let l1: f64 = g.displacement(&space.points[0], &space.points[1]).iter().map(|d| d.abs()).sum();
        table.push(row![m, g.num_vertices(), space.dist[0][1] * phi0, space.dist[0][1], l1, dev]);
        devs.push(dev);
    }
    out.put("phi0", phi0);
    out.put("deviations", &devs);
    out.check(
        "deviation_decreasing",
        devs.windows(2).all(|w| w[1] < w[0]),
        format!("taxicab deviation by generation {devs:.4?}"),
    );
    let last = *devs.last().unwrap();
    out.check("deviation_small_at_finest", last < par.max_deviation, format!("{last:.4} (bound {})", par.max_deviation));
    out.tables = vec![table];
    Ok(out)
}
