use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{presets, LabError, LabResult};

pub const SCHEMA_VERSION: u32 = 1;

/// One experiment file:
///
/// ```toml
/// schema_version = 1
/// experiment = "euclid-scaling"
/// seed = 1
/// output_dir = "out/euclid"   # optional
///
/// [params]                    # preset specific, see `dpgeo describe <preset>`
/// p = 3.0
/// ```
///
/// Unknown keys are rejected at both levels; missing params take the preset defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: String,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub params: toml::Table,
}

fn default_seed() -> u64 {
    1
}

impl ExperimentConfig {
    pub fn for_preset(name: &str) -> LabResult<Self> {
        presets::info(name)?;
        Ok(ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            experiment: name.to_string(),
            seed: default_seed(),
            output_dir: None,
            params: toml::Table::new(),
        })
    }

    pub fn from_toml_str(text: &str) -> LabResult<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| LabError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            LabError::Schema(m) => LabError::Schema(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Version, preset name and the params table (parsed against the preset's schema).
    pub fn validate(&self) -> LabResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(LabError::Schema(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        presets::info(&self.experiment)?;
        presets::check_params(&self.experiment, &self.params)
    }

    /// `--set key=value`. Dotted keys reach into sub-tables (`dp.max_iter=50`); the value is
    /// read as a TOML value and falls back to a bare string.
    pub fn set(&mut self, assignment: &str) -> LabResult<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| LabError::Schema(format!("expected key=value, got '{assignment}'")))?;
        self.set_value(key.trim(), parse_value(raw.trim()))
    }

    pub fn set_value(&mut self, key: &str, value: toml::Value) -> LabResult<()> {
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| LabError::Schema(format!("empty key '{key}'")))?;
        let mut table = &mut self.params;
        for part in parts {
            let entry = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            table = entry.as_table_mut().ok_or_else(|| LabError::Schema(format!("'{part}' in '{key}' is not a table")))?;
        }
        table.insert(last.to_string(), value);
        Ok(())
    }

    /// Shorthand flags such as `--delta`: sets `singular` if the preset has that key, or
    /// `plural` to a one-element list if it sweeps over it instead.
    pub fn set_shorthand(&mut self, singular: &str, plural: &str, value: toml::Value) -> LabResult<()> {
        let defaults = presets::default_params(&self.experiment)?;
        if defaults.contains_key(singular) {
            self.set_value(singular, value)
        } else if defaults.contains_key(plural) {
            self.set_value(plural, toml::Value::Array(vec![value]))
        } else {
            Err(LabError::Schema(format!("preset {} has no '{singular}' parameter", self.experiment)))
        }
    }
}

pub fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn values_parse_as_toml_then_string() {
        assert_eq!(parse_value("3"), toml::Value::Integer(3));
        assert_eq!(parse_value("1e-3"), toml::Value::Float(1e-3));
        assert_eq!(parse_value("[1, 2]").as_array().map(|a| a.len()), Some(2));
        assert_eq!(parse_value("inner"), toml::Value::String("inner".into()));
    }

    #[test]
    fn dotted_keys_build_tables() {
        let mut cfg = ExperimentConfig::for_preset("euclid-scaling").unwrap();
        cfg.set("dp.max_iter = 40").unwrap();
        assert_eq!(cfg.params["dp"]["max_iter"].as_integer(), Some(40));
        cfg.validate().unwrap();
        cfg.set("dp.bogus=1").unwrap();
        assert!(matches!(cfg.validate(), Err(LabError::Schema(_))));
    }

    #[test]
    fn rejects_unknown_top_level_keys_and_versions() {
        let ok = "schema_version = 1\nexperiment = \"taxicab\"\n";
        assert!(ExperimentConfig::from_toml_str(ok).is_ok());
        assert!(ExperimentConfig::from_toml_str(&format!("{ok}colour = 1\n")).is_err());
        assert!(ExperimentConfig::from_toml_str("schema_version = 2\nexperiment = \"taxicab\"\n").is_err());
        assert!(ExperimentConfig::from_toml_str("schema_version = 1\nexperiment = \"nope\"\n").is_err());
    }

    #[test]
    fn shorthand_picks_scalar_or_sweep_key() {
        let mut cfg = ExperimentConfig::for_preset("building-block-curvature").unwrap();
        cfg.set_shorthand("delta", "deltas", toml::Value::Float(1e-3)).unwrap();
        assert_eq!(cfg.params["deltas"].as_array().unwrap().len(), 1);
        let mut cfg = ExperimentConfig::for_preset("flow-warped").unwrap();
        cfg.set_shorthand("delta", "deltas", toml::Value::Float(0.05)).unwrap();
        assert_eq!(cfg.params["delta"].as_float(), Some(0.05));
        assert!(cfg.set_shorthand("alpha", "alphas", toml::Value::Float(0.5)).is_err());
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::for_preset("lq-scalar").unwrap();
        cfg.set("q=0.25").unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
