//! Preset experiments, their configuration files and result emission for the `dpgeo`
//! command. The binary is a thin clap front end over [`run_config`].

pub mod config;
pub mod output;
pub mod presets;

use std::path::{Path, PathBuf};

pub use config::{ExperimentConfig, SCHEMA_VERSION};
pub use presets::{Check, Outcome, Table, PRESETS};

/// Environment variable that overrides every other output directory setting.
pub const OUTPUT_DIR_ENV: &str = "DPGEO_OUTPUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error(transparent)]
    Core(#[from] dpgeo_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl LabError {
    /// 2 for anything the user can fix in the config, 3 for numerical breakdown, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use dpgeo_core::Error as E;
        match self {
            LabError::Schema(_) => 2,
            LabError::Core(E::Domain(_) | E::Config(_) | E::Parse(_)) => 2,
            LabError::Core(E::Singular(_) | E::Cfl { .. }) => 3,
            LabError::Core(E::Io(_)) | LabError::Io(_) => 1,
        }
    }
}

pub type LabResult<T> = std::result::Result<T, LabError>;

/// Where artifacts of `cfg` go: `$DPGEO_OUTPUT_DIR/<preset>`, else `cfg.output_dir`, else
/// `dpgeo-out/<preset>`.
pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
        return Path::new(&dir).join(&cfg.experiment);
    }
    match &cfg.output_dir {
        Some(dir) => dir.clone(),
        None => Path::new("dpgeo-out").join(&cfg.experiment),
    }
}

/// Result of a run after the artifacts have been written.
#[derive(Debug)]
pub struct RunReport {
    pub outcome: Outcome,
    pub dir: PathBuf,
}

impl RunReport {
    pub fn checks_pass(&self) -> bool {
        self.outcome.checks.iter().all(|c| c.pass)
    }

    /// 0, or 3 when some solve did not converge, or 1 when `check` is set and a check failed.
    pub fn exit_code(&self, check: bool) -> i32 {
        if !self.outcome.unconverged.is_empty() {
            3
        } else if check && !self.checks_pass() {
            1
        } else {
            0
        }
    }
}

/// Validates `cfg`, runs its preset and writes `summary.json` plus the CSV tables.
pub fn run_config(cfg: &ExperimentConfig) -> LabResult<RunReport> {
    cfg.validate()?;
    let outcome = presets::run(cfg)?;
    let dir = output_dir(cfg);
    output::write_artifacts(&dir, cfg, &outcome)?;
    Ok(RunReport { outcome, dir })
}
