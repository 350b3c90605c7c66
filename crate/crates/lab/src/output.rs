use std::fs;
use std::path::Path;

use serde_json::json;

use crate::{ExperimentConfig, LabResult, Outcome, SCHEMA_VERSION};

/// `summary.json` plus one `<table>.csv` per table. Floats are written in shortest
/// round-trip form so reruns compare byte for byte.
pub fn write_artifacts(dir: &Path, cfg: &ExperimentConfig, outcome: &Outcome) -> LabResult<()> {
    fs::create_dir_all(dir)?;
    for table in &outcome.tables {
        let mut w = csv::Writer::from_path(dir.join(format!("{}.csv", table.name))).map_err(csv_err)?;
        w.write_record(&table.header).map_err(csv_err)?;
        for row in &table.rows {
            w.write_record(row).map_err(csv_err)?;
        }
        w.flush()?;
    }
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary_json(cfg, outcome)).expect("summary serializes") + "\n")?;
    Ok(())
}

pub fn summary_json(cfg: &ExperimentConfig, outcome: &Outcome) -> serde_json::Value {
    json!({
        "experiment": cfg.experiment,
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "params": outcome.params,
        "results": outcome.summary,
        "checks": outcome.checks,
        "all_checks_pass": outcome.checks.iter().all(|c| c.pass),
        "unconverged": outcome.unconverged,
        "tables": outcome.tables.iter().map(|t| format!("{}.csv", t.name)).collect::<Vec<_>>(),
    })
}

fn csv_err(e: csv::Error) -> crate::LabError {
    crate::LabError::Io(std::io::Error::other(e.to_string()))
}
