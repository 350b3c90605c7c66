use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use dpgeo_core::grid_manifold::GridSpec;
use dpgeo_core::ricci_flow::{
    conformal_flow_until, monitor_invariants, oscillation, scalar_residual_over, warped_flow_until, ConformalFlowState,
    FlowSample, WarpedFlowState,
};
use dpgeo_core::warped_metrics::{BuildingBlockParams, ProfilePair};

use super::{row, schema_err, Outcome, Table};
use crate::LabResult;

fn history_table(history: &[FlowSample], stride: usize) -> Table {
    let mut t = Table::new("history", &["step", "t", "min_r", "max_abs_r", "volume", "step_volume_ratio", "minus_integral_r"]);
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    let stride = stride.max(1);
    for (k, s) in history.iter().enumerate() {
        if k % stride == 0 || k + 1 == history.len() {
            t.push(row![k, s.t, s.min_r, s.max_abs_r, s.volume, opt(s.step_volume_ratio), opt(s.minus_integral_r)]);
        }
    }
    t
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConformalParams {
    pub cells: usize,
    /// `u0 = amplitude sin(2 pi x) sin(2 pi y)`.
    pub amplitude: f64,
    pub t_end: f64,
    /// Largest allowed per-step decrease of min R.
    pub min_r_drop_max: f64,
    pub oscillation_max: f64,
    /// Every `history_stride`-th step goes to history.csv.
    pub history_stride: usize,
}

impl Default for FlowConformalParams {
    fn default() -> Self {
        FlowConformalParams { cells: 64, amplitude: 0.1, t_end: 2.0, min_r_drop_max: 1e-6, oscillation_max: 0.01, history_stride: 100 }
    }
}

pub fn conformal(par: &FlowConformalParams) -> LabResult<Outcome> {
    if !(par.t_end > 0.0) {
        return Err(schema_err("t_end must be positive"));
    }
    let amp = par.amplitude;
    let mut state =
        ConformalFlowState::new(&GridSpec::unit_torus(2, par.cells), |x| amp * (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin())?;
    let osc0 = oscillation(&state.u);
    conformal_flow_until(&mut state, par.t_end)?;
    let rep = monitor_invariants(&state.history)?;
    let osc = oscillation(&state.u);

    let mut out = Outcome::new(par);
    out.put("steps", rep.steps);
    out.put("t", rep.t);
    out.put("max_min_r_drop", rep.max_min_r_drop);
    out.put("initial_oscillation", osc0);
    out.put("final_oscillation", osc);
    out.put("volume_inequality_holds", rep.volume_inequality_holds);
    out.check(
        "min_r_nondecreasing",
        rep.max_min_r_drop <= par.min_r_drop_max,
        format!("largest per-step drop of min R {:.3e} over {} steps", rep.max_min_r_drop, rep.steps),
    );
    out.check(
        "oscillation_decays",
        osc <= par.oscillation_max,
        format!("||u - mean u||_inf = {osc:.3e} at t = {} (from {osc0:.3e})", rep.t),
    );
    out.tables = vec![history_table(&state.history, par.history_stride)];
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowWarpedParams {
    pub n: usize,
    pub delta: f64,
    pub epsilon: f64,
    pub cone_gain: f64,
    pub r_max: f64,
    /// Nodes and end time of the monitored run.
    pub nodes: usize,
    pub t_end: f64,
    /// Two resolutions with spacing ratio sqrt(2) (so dt and spacing^2 halve) for the
    /// scalar-evolution residual.
    pub residual_nodes: [usize; 2],
    pub residual_window: f64,
    /// Required residual ratio fine / coarse.
    pub residual_ratio_max: f64,
    pub history_stride: usize,
}

impl Default for FlowWarpedParams {
    fn default() -> Self {
        FlowWarpedParams {
            n: 3,
            delta: 0.2,
            epsilon: 0.2,
            cone_gain: 1.0,
            r_max: 10.0,
            nodes: 1000,
            t_end: 0.04,
            residual_nodes: [11314, 16000],
            residual_window: 1e-6,
            residual_ratio_max: 0.5,
            history_stride: 10,
        }
    }
}

pub fn warped(par: &FlowWarpedParams) -> LabResult<Outcome> {
    let params = BuildingBlockParams::new(par.n, par.delta, par.epsilon)?.with_gain(par.cone_gain)?;
    let pair = ProfilePair::building_block(&params, par.r_max)?;
    let mut out = Outcome::new(par);

    let mut state = WarpedFlowState::new(&pair, par.n, par.nodes)?;
    warped_flow_until(&mut state, par.t_end)?;
    if let Some(why) = &state.halted {
        out.not_converged(false, format!("flow halted at t = {}: {why}", state.t));
    }
    let rep = monitor_invariants(&state.history)?;
    out.put("steps", rep.steps);
    out.put("t", rep.t);
    out.put("max_min_r_drop", rep.max_min_r_drop);
    out.put("max_volume_rate_error", rep.max_volume_rate_error);
    out.put("min_r_initial", state.history.first().map(|s| s.min_r));
    out.put("min_r_final", state.history.last().map(|s| s.min_r));
    out.check(
        "volume_inequality_each_step",
        rep.volume_inequality_holds,
        format!("{} steps to t = {} on {} nodes", rep.steps, rep.t, par.nodes),
    );

    let [coarse, fine] = par.residual_nodes;
    if fine <= coarse {
        return Err(schema_err("residual_nodes must be increasing"));
    }
    let residual = |nodes: usize| -> dpgeo_core::Result<f64> {
        let st = WarpedFlowState::new(&pair, par.n, nodes)?;
        scalar_residual_over(&st, par.residual_window)
    };
    let (rc, rf) = (residual(coarse)?, residual(fine)?);
    let ratio = rf / rc;
    out.put("scalar_residual", serde_json::json!({"nodes": par.residual_nodes, "residual": [rc, rf], "ratio": ratio}));
    out.check(
        "scalar_residual_halves",
        ratio <= par.residual_ratio_max,
        format!("residual {rc:.3e} ({coarse} nodes) -> {rf:.3e} ({fine} nodes), ratio {ratio:.3}"),
    );
    out.tables = vec![history_table(&state.history, par.history_stride)];
    Ok(out)
}
