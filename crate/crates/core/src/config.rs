//! Experiment configuration: TOML with dotted section keys, every field
//! defaulted, plus `key=value` overrides applied before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::datagen::{ImbalancedSslConfig, SpuriousGenConfig, DEFAULT_FOLDS};
use crate::error::{invalid, Result};
use crate::pseudolabel::PseudoLabelConfig;
use crate::robust::{RobustConfig, RobustMethod};

/// Named dataset presets accepted as `dataset.preset`.
pub const PRESETS: &[&str] = &["ssl-100-4900-50"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileDataset {
    pub labeled: PathBuf,
    pub unlabeled: PathBuf,
    pub test: PathBuf,
    /// Same rows as `unlabeled` with attributes; used only for reporting.
    #[serde(default)]
    pub unlabeled_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Spurious(SpuriousGenConfig),
    Imbalanced(ImbalancedSslConfig),
    File(FileDataset),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Spurious(SpuriousGenConfig::default())
    }
}

impl DatasetSpec {
    /// Copy with the generator seed shifted by `run_seed`. File datasets are
    /// returned unchanged.
    pub fn for_seed(&self, run_seed: u64) -> DatasetSpec {
        let mut spec = self.clone();
        match &mut spec {
            DatasetSpec::Spurious(c) => c.seed = c.seed.wrapping_add(run_seed),
            DatasetSpec::Imbalanced(c) => c.seed = c.seed.wrapping_add(run_seed),
            DatasetSpec::File(_) => {}
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub labeled_fraction: f64,
    pub k_folds: usize,
    pub pseudo: PseudoLabelConfig,
    pub robust_method: RobustMethod,
    pub robust: RobustConfig,
    /// Skip Phase 1 and train on the true attributes of the unlabeled set
    /// (fully supervised reference).
    pub ground_truth_attributes: bool,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSpec::default(),
            labeled_fraction: 1.0,
            k_folds: DEFAULT_FOLDS,
            pseudo: PseudoLabelConfig::default(),
            robust_method: RobustMethod::Dro,
            robust: RobustConfig::default(),
            ground_truth_attributes: false,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return Err(invalid(format!(
                "labeled_fraction = {} outside (0, 1]",
                self.labeled_fraction
            )));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds must be nonempty"));
        }
        if self.k_folds == 0 {
            return Err(invalid("k_folds must be at least 1"));
        }
        match &self.dataset {
            DatasetSpec::Spurious(c) => c.validate()?,
            DatasetSpec::Imbalanced(c) => c.validate()?,
            DatasetSpec::File(_) => {}
        }
        self.pseudo.validate()?;
        self.robust.validate()
    }

    /// Parse TOML text, apply `key=value` overrides, validate.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| invalid(format!("config parse error: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table)
    }

    pub fn from_path(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn from_table(mut table: Table) -> Result<Self> {
        expand_preset(&mut table)?;
        let cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(format!("config error: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fully resolved configuration as a TOML document.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Set `dotted.key = value` in `table`. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| invalid(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(invalid(format!("override `{spec}` has an empty key segment")));
    }
    let value = format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("nonempty");
    let mut cur = table;
    for part in path {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(invalid(format!("override `{spec}`: `{part}` is not a section"))),
        };
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn expand_preset(table: &mut Table) -> Result<()> {
    let Some(Value::Table(dataset)) = table.get_mut("dataset") else {
        return Ok(());
    };
    let Some(preset) = dataset.remove("preset") else {
        // a bare `dataset.*` override means the default generator
        dataset
            .entry("kind")
            .or_insert_with(|| Value::String("spurious".into()));
        return Ok(());
    };
    let base = match preset.as_str() {
        Some("ssl-100-4900-50") => ImbalancedSslConfig::preset_100_4900_50(),
        _ => {
            return Err(invalid(format!(
                "unknown dataset preset {preset}; known: {}",
                PRESETS.join(", ")
            )))
        }
    };
    let Value::Table(mut merged) = Value::try_from(&base).expect("preset serializes") else {
        unreachable!("struct serializes to a table");
    };
    merged.extend(std::mem::take(dataset));
    merged.insert("kind".into(), Value::String("imbalanced".into()));
    *dataset = merged;
    Ok(())
}
