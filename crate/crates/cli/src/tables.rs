//! Text formats: datasets, miss tables, distributions, coreset files and
//! delta dumps.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use qcore::bitflip::DeltaRecord;
use qcore::coreset::{BinQuota, QCoreSet};
use qcore::data::{Dataset, Example};
use qcore::misses::{MissPmf, MissTable, PmfLevel};
use qcore::quant::{Level, QuantLevels};

use crate::error::{CliError, Result};
use crate::io;

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// Which column of a dataset CSV holds the label.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CsvSchema {
    pub label_column: Option<String>,
    pub classes: Option<usize>,
}

/// Load a dataset: a header row, then one example per row. Every column
/// other than the label is a feature, in file order. Ids count rows from
/// `first_id`.
pub fn load_dataset(path: &Path, schema: &CsvSchema, first_id: u64) -> Result<Dataset> {
    let text = io::read_string(path)?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| CliError::parse(path, e))?.clone();
    if header.len() < 2 {
        return Err(CliError::parse(
            path,
            "need at least one feature column and a label column",
        ));
    }
    let label_at = match &schema.label_column {
        None => header.len() - 1,
        Some(name) => header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::parse(path, format!("no column named {name:?}")))?,
    };
    let mut examples = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| CliError::parse(path, format!("row {row}: {e}")))?;
        if record.len() != header.len() {
            return Err(CliError::parse(
                path,
                format!("row {row}: expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        let mut features = Vec::with_capacity(header.len() - 1);
        let mut label = 0;
        for (c, field) in record.iter().enumerate() {
            let field = field.trim();
            if c == label_at {
                label = field
                    .parse::<usize>()
                    .map_err(|_| CliError::parse(path, format!("row {row}: label {field:?} is not a class index")))?;
            } else {
                let v: f64 = field
                    .parse()
                    .map_err(|_| CliError::parse(path, format!("row {row}: {field:?} is not a number")))?;
                if !v.is_finite() {
                    return Err(CliError::parse(path, format!("row {row}: non-finite feature")));
                }
                features.push(v);
            }
        }
        if let Some(k) = schema.classes {
            if label >= k {
                return Err(CliError::parse(
                    path,
                    format!("row {row}: unknown label {label} for {k} classes"),
                ));
            }
        }
        examples.push(Example {
            id: first_id + i as u64,
            features,
            label,
        });
    }
    if examples.is_empty() {
        return Err(CliError::parse(path, "no data rows"));
    }
    let classes = schema
        .classes
        .unwrap_or_else(|| examples.iter().map(|e| e.label).max().unwrap_or(0) + 1);
    let tag = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Dataset::new(examples, classes, tag)?)
}

/// Dataset CSV with columns `x0..x{d-1},label`.
pub fn dataset_csv(data: &Dataset) -> Vec<u8> {
    let mut header: Vec<String> = (0..data.dim()).map(|i| format!("x{i}")).collect();
    header.push("label".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_bytes(
        &header,
        data.examples.iter().map(|e| {
            let mut row: Vec<String> = e.features.iter().map(|v| v.to_string()).collect();
            row.push(e.label.to_string());
            row
        }),
    )
}

/// `id,level,misses`, one row per example and level.
pub fn misses_csv(table: &MissTable) -> Vec<u8> {
    csv_bytes(
        &["id", "level", "misses"],
        table
            .entries()
            .map(|(id, level, m)| vec![id.to_string(), level.to_string(), m.to_string()]),
    )
}

pub fn load_misses(path: &Path) -> Result<MissTable> {
    #[derive(Deserialize)]
    struct Row {
        id: u64,
        level: u8,
        misses: u32,
    }
    let text = io::read_string(path)?;
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut ids = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut levels: Vec<Level> = Vec::new();
    let mut cells: BTreeMap<(u64, Level), u32> = BTreeMap::new();
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.map_err(|e| CliError::parse(path, format!("row {}: {e}", i + 1)))?;
        let level = Level::try_from(row.level).map_err(|e| CliError::parse(path, format!("row {}: {e}", i + 1)))?;
        if !levels.contains(&level) {
            levels.push(level);
        }
        if seen.insert(row.id) {
            ids.push(row.id);
        }
        if cells.insert((row.id, level), row.misses).is_some() {
            return Err(CliError::parse(
                path,
                format!("row {}: duplicate entry for id {} at level {level}", i + 1, row.id),
            ));
        }
    }
    if ids.is_empty() {
        return Err(CliError::parse(path, "no rows"));
    }
    let mut counts = Vec::with_capacity(ids.len());
    for &id in &ids {
        let row = levels
            .iter()
            .map(|&l| {
                cells
                    .get(&(id, l))
                    .copied()
                    .ok_or_else(|| CliError::parse(path, format!("id {id} has no entry at level {l}")))
            })
            .collect::<Result<Vec<_>>>()?;
        counts.push(row);
    }
    let epochs = cells.values().copied().max().unwrap_or(0);
    let levels = QuantLevels::new(levels).map_err(|e| CliError::parse(path, e))?;
    MissTable::from_counts(ids, levels, &counts, epochs).map_err(|e| CliError::parse(path, e))
}

/// `level,k,count` for every configured level, then the summed distribution.
pub fn pmf_csv(table: &MissTable) -> qcore::Result<Vec<u8>> {
    let mut which: Vec<PmfLevel> = table.levels().as_slice().iter().map(|&l| PmfLevel::Level(l)).collect();
    which.push(PmfLevel::Summed);
    let mut rows = Vec::new();
    for w in which {
        for (k, n) in table.pmf(w)?.bins {
            rows.push(vec![w.to_string(), k.to_string(), n.to_string()]);
        }
    }
    Ok(csv_bytes(&["level", "k", "count"], rows))
}

/// `layer,index,epoch,delta_a,delta_p`; `layer` is the parameter tensor.
pub fn deltas_csv(records: &[DeltaRecord]) -> Vec<u8> {
    csv_bytes(
        &["layer", "index", "epoch", "delta_a", "delta_p"],
        records.iter().map(|r| {
            vec![
                r.tensor.to_string(),
                r.index.to_string(),
                r.epoch.to_string(),
                r.delta_a.to_string(),
                r.delta_p.to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinRow {
    pub k: u32,
    pub population: u64,
    pub quota: u64,
    pub selected: u64,
}

/// On-disk coreset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoreFile {
    pub size_budget: usize,
    pub lambda: f64,
    pub seed: u64,
    pub ids: Vec<u64>,
    /// Bin each member was drawn from, aligned with `ids`.
    pub member_bins: Vec<u32>,
    pub bins: Vec<BinRow>,
}

impl CoreFile {
    pub fn from_core(core: &QCoreSet) -> Self {
        CoreFile {
            size_budget: core.size_budget,
            lambda: core.lambda,
            seed: core.seed,
            ids: core.ids(),
            member_bins: core.member_bins.clone(),
            bins: core
                .bins
                .iter()
                .map(|b| BinRow {
                    k: b.misses,
                    population: b.population,
                    quota: b.quota,
                    selected: b.selected,
                })
                .collect(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("coreset file serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: CoreFile = toml::from_str(&io::read_string(path)?).map_err(|e| CliError::parse(path, e))?;
        if file.ids.len() != file.member_bins.len() {
            return Err(CliError::parse(path, "ids and member_bins differ in length"));
        }
        Ok(file)
    }

    /// Rebuild the coreset with member features looked up in `pool`.
    pub fn to_core(&self, pool: &[Example]) -> qcore::Result<QCoreSet> {
        let by_id: BTreeMap<u64, &Example> = pool.iter().map(|e| (e.id, e)).collect();
        let members = self
            .ids
            .iter()
            .map(|id| {
                by_id
                    .get(id)
                    .map(|&e| e.clone())
                    .ok_or_else(|| qcore::Error::Usage(format!("coreset member {id} is not in the source pool")))
            })
            .collect::<qcore::Result<Vec<_>>>()?;
        Ok(QCoreSet {
            members,
            member_bins: self.member_bins.clone(),
            size_budget: self.size_budget,
            lambda: self.lambda,
            seed: self.seed,
            bins: self
                .bins
                .iter()
                .map(|b| BinQuota {
                    misses: b.k,
                    population: b.population,
                    quota: b.quota,
                    selected: b.selected,
                })
                .collect(),
            source_pmf: MissPmf::from_bins(PmfLevel::Summed, self.bins.iter().map(|b| (b.k, b.population))),
            warnings: Vec::new(),
        })
    }
}
