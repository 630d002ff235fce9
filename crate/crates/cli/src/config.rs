//! Configuration file and command line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use qcore::data::Dataset;
use qcore::harness::{synthetic_data, ExperimentConfig};
use qcore::quant::{Level, QuantLevels};

use crate::error::{CliError, Result};
use crate::io;
use crate::tables::{load_dataset, CsvSchema};

/// CSV-ingested source and target domains, replacing the synthetic pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvData {
    pub source: PathBuf,
    pub target: PathBuf,
    /// Label column name; the last column when absent.
    pub label_column: Option<String>,
    /// Number of classes; one more than the largest label when absent.
    pub classes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory receiving every artifact and report.
    pub out: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { out: "out".into() }
    }
}

/// Everything a run needs. Relative paths in a file resolve against the
/// file's directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub experiment: ExperimentConfig,
    pub paths: Paths,
    pub data: Option<CsvData>,
    /// Log filter used when `QCORE_LOG` is unset.
    pub log: Option<String>,
}

impl CliConfig {
    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::parse(&io::read_string(path)?).map_err(|e| CliError::parse(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.paths.out);
        if let Some(d) = &mut cfg.data {
            resolve(&mut d.source);
            resolve(&mut d.target);
        }
        Ok(cfg)
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.paths.out.join(name)
    }

    /// Seed of single-lane commands: the first configured one.
    pub fn first_seed(&self) -> Result<u64> {
        self.experiment
            .seeds
            .first()
            .copied()
            .ok_or_else(|| CliError::Usage("no seeds configured".into()))
    }

    /// Source and target domains of one lane.
    pub fn domains(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match &self.data {
            None => Ok(synthetic_data(&self.experiment, seed)?),
            Some(d) => {
                let schema = CsvSchema {
                    label_column: d.label_column.clone(),
                    classes: d.classes,
                };
                let source = load_dataset(&d.source, &schema, 0)?;
                let target = load_dataset(&d.target, &schema, source.len() as u64)?;
                Ok((source, target))
            }
        }
    }
}

/// Comma-separated bit widths such as `2,4,8`.
pub fn parse_levels(s: &str) -> std::result::Result<QuantLevels, String> {
    let levels = s
        .split(',')
        .map(|t| {
            let v: u8 = t.trim().parse().map_err(|_| format!("{t:?} is not a bit width"))?;
            Level::try_from(v).map_err(|e| e.to_string())
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    QuantLevels::new(levels).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = CliConfig::default();
        let text = cfg.to_toml();
        assert_eq!(CliConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn csv_section_round_trips() {
        let cfg = CliConfig {
            data: Some(CsvData {
                source: "a.csv".into(),
                target: "b.csv".into(),
                label_column: Some("y".into()),
                classes: Some(3),
            }),
            log: Some("debug".into()),
            ..CliConfig::default()
        };
        assert_eq!(CliConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = CliConfig::parse("[experiment]\ncore_budget = 12\n").unwrap();
        assert_eq!(cfg.experiment.core_budget, 12);
        assert_eq!(cfg.experiment.n_batches, ExperimentConfig::default().n_batches);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(CliConfig::parse("[experiment]\nbudget = 12\n").is_err());
    }

    #[test]
    fn level_lists() {
        assert_eq!(parse_levels("2, 4,8").unwrap().len(), 3);
        assert!(parse_levels("2,2").is_err());
        assert!(parse_levels("1").is_err());
        assert!(parse_levels("").is_err());
    }
}
