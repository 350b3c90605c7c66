//! The preset experiments. Each preset owns a params struct (`serde(default,
//! deny_unknown_fields)`, so its `Default` is the published schema) and a `run` function that
//! returns tables, a JSON summary and named pass/fail checks.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::{ExperimentConfig, LabError, LabResult};

mod collapse;
mod curvature;
mod dp;
mod entropy;
mod flow;

pub use collapse::{TaxicabParams, TorusCollapseParams};
pub use curvature::{BuildingBlockCurvatureParams, LqScalarParams, StripTorus};
pub use dp::{EuclidScalingParams, PowerDegeneracyParams};
pub use entropy::{EntropyFlatTorusParams, EntropyStripSweepParams};
pub use flow::{FlowConformalParams, FlowWarpedParams};

pub struct PresetInfo {
    pub name: &'static str,
    pub about: &'static str,
}

pub const PRESETS: &[PresetInfo] = &[
    PresetInfo { name: "euclid-scaling", about: "log-log slope of d_p against |x - y| on a flat square (target 1 - n/p)" },
    PresetInfo { name: "power-degeneracy", about: "d_p across the line x = 0 of dx^2 + |x|^{2 alpha} dy^2 under grid refinement" },
    PresetInfo { name: "building-block-curvature", about: "minimum scalar curvature of the building block over a (delta, eps) sweep" },
    PresetInfo { name: "torus-collapse", about: "torus with a collapsing strip: d_p closeness to the flat torus vs geodesic collapse" },
    PresetInfo { name: "taxicab", about: "strip lattices of increasing density: geodesic distance against the l1 distance" },
    PresetInfo { name: "entropy-flat-torus", about: "mu entropy of the flat unit torus over a tau sweep" },
    PresetInfo { name: "entropy-strip-sweep", about: "mu entropy of a torus with one building-block strip as (delta, eps) shrink" },
    PresetInfo { name: "flow-conformal", about: "conformal Ricci flow on the flat torus: min R and oscillation of u" },
    PresetInfo { name: "flow-warped", about: "Ricci flow of the building block: volume inequality and scalar-evolution residual" },
    PresetInfo { name: "lq-scalar", about: "L^q norm of the scalar curvature (q < 1) along the strip sweep" },
];

pub fn info(name: &str) -> LabResult<&'static PresetInfo> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        LabError::Schema(format!("unknown experiment '{name}' (one of: {})", names.join(", ")))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Table { name: name.to_string(), header: header.iter().map(|h| h.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

macro_rules! row {
    ($($x:expr),* $(,)?) => { vec![$($x.to_string()),*] };
}
pub(crate) use row;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Outcome {
    /// Params after defaults were filled in.
    pub params: serde_json::Value,
    pub summary: serde_json::Map<String, serde_json::Value>,
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    /// Solves that stopped at their iteration cap, by label.
    pub unconverged: Vec<String>,
}

impl Outcome {
    pub fn new(params: &impl Serialize) -> Self {
        Outcome { params: serde_json::to_value(params).expect("params serialize"), ..Default::default() }
    }

    pub fn put(&mut self, key: &str, value: impl Serialize) {
        self.summary.insert(key.to_string(), serde_json::to_value(value).expect("summary value serializes"));
    }

    pub fn check(&mut self, name: &str, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.to_string(), pass, detail: detail.into() });
    }

    pub fn check_named(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn not_converged(&mut self, converged: bool, label: impl Into<String>) {
        if !converged {
            self.unconverged.push(label.into());
        }
    }
}

pub(crate) fn parse<P: DeserializeOwned>(params: &toml::Table) -> LabResult<P> {
    toml::Value::Table(params.clone()).try_into().map_err(|e: toml::de::Error| LabError::Schema(e.to_string()))
}

fn table_of<P: Serialize + Default>() -> toml::Table {
    toml::Table::try_from(P::default()).expect("defaults serialize to a table")
}

pub(crate) fn schema_err(msg: impl Into<String>) -> LabError {
    LabError::Schema(msg.into())
}

macro_rules! dispatch {
    ($name:expr, $params:ident => $body:expr, defaults $defaults:ident => $dbody:expr) => {
        match $name {
            "euclid-scaling" => { type $params = EuclidScalingParams; $body }
            "power-degeneracy" => { type $params = PowerDegeneracyParams; $body }
            "building-block-curvature" => { type $params = BuildingBlockCurvatureParams; $body }
            "torus-collapse" => { type $params = TorusCollapseParams; $body }
            "taxicab" => { type $params = TaxicabParams; $body }
            "entropy-flat-torus" => { type $params = EntropyFlatTorusParams; $body }
            "entropy-strip-sweep" => { type $params = EntropyStripSweepParams; $body }
            "flow-conformal" => { type $params = FlowConformalParams; $body }
            "flow-warped" => { type $params = FlowWarpedParams; $body }
            "lq-scalar" => { type $params = LqScalarParams; $body }
            other => { let $defaults = other; $dbody }
        }
    };
}

/// Default params of a preset, as written by `dpgeo describe`.
pub fn default_params(name: &str) -> LabResult<toml::Table> {
    dispatch!(name, P => Ok(table_of::<P>()), defaults n => info(n).map(|_| unreachable!()))
}

pub fn check_params(name: &str, params: &toml::Table) -> LabResult<()> {
    dispatch!(name, P => parse::<P>(params).map(|_| ()), defaults n => info(n).map(|_| ()))
}

pub fn run(cfg: &ExperimentConfig) -> LabResult<Outcome> {
    let seed = cfg.seed;
    let p = &cfg.params;
    match cfg.experiment.as_str() {
        "euclid-scaling" => dp::euclid_scaling(&parse(p)?),
        "power-degeneracy" => dp::power_degeneracy(&parse(p)?),
        "building-block-curvature" => curvature::building_block(&parse(p)?),
        "torus-collapse" => collapse::torus_collapse(&parse(p)?, seed),
        "taxicab" => collapse::taxicab(&parse(p)?),
        "entropy-flat-torus" => entropy::flat_torus(&parse(p)?, seed),
        "entropy-strip-sweep" => entropy::strip_sweep(&parse(p)?, seed),
        "flow-conformal" => flow::conformal(&parse(p)?),
        "flow-warped" => flow::warped(&parse(p)?),
        "lq-scalar" => curvature::lq_scalar(&parse(p)?),
        other => Err(info(other).err().unwrap_or_else(|| schema_err(format!("no runner for '{other}'")))),
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub(crate) fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Strictly increasing along the slice.
pub(crate) fn increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}
