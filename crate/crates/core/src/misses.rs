//! Quantization-miss tracking.
//!
//! After each full-precision training epoch the model is quantized at every
//! tracked level and each example is classified by the temporary proxy. A
//! miss is counted when an example that the proxy classified correctly after
//! the previous epoch is misclassified after the current one. The first
//! observation only seeds the previous state.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::data::Example;
use crate::error::{usage, Result};
use crate::nn::{FpModel, OpCounts};
use crate::quant::{Level, QuantLevels};

/// Which distribution a [`MissPmf`] describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PmfLevel {
    Level(Level),
    /// Per-level distributions added bin by bin.
    Summed,
}

impl fmt::Display for PmfLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PmfLevel::Level(l) => write!(f, "{l}"),
            PmfLevel::Summed => f.write_str("summed"),
        }
    }
}

/// Histogram `{(k, N_k)}` of miss counts, sorted by `k`, empty bins omitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MissPmf {
    pub level: PmfLevel,
    pub bins: Vec<(u32, u64)>,
}

impl MissPmf {
    /// Normalise arbitrary `(k, N_k)` pairs: merge duplicates, drop zeros, sort.
    pub fn from_bins(level: PmfLevel, bins: impl IntoIterator<Item = (u32, u64)>) -> Self {
        let mut merged = BTreeMap::new();
        for (k, n) in bins {
            *merged.entry(k).or_insert(0u64) += n;
        }
        MissPmf {
            level,
            bins: merged.into_iter().filter(|&(_, n)| n > 0).collect(),
        }
    }

    /// `sum_k N_k`.
    pub fn total(&self) -> u64 {
        self.bins.iter().map(|&(_, n)| n).sum()
    }

    /// Largest `k` with `N_k > 0`; zero for an empty or all-zero table.
    pub fn max_misses(&self) -> u32 {
        self.bins.last().map_or(0, |&(k, _)| k)
    }

    pub fn count(&self, k: u32) -> u64 {
        self.bins.iter().find(|&&(bk, _)| bk == k).map_or(0, |&(_, n)| n)
    }
}

/// Per-example, per-level miss counters.
#[derive(Debug, Clone, PartialEq)]
pub struct MissTable {
    ids: Vec<u64>,
    index: BTreeMap<u64, usize>,
    levels: QuantLevels,
    /// Row-major `ids x levels`.
    misses: Vec<u32>,
    last_correct: Vec<Option<bool>>,
    epochs_observed: u32,
}

impl MissTable {
    pub fn new(ids: Vec<u64>, levels: QuantLevels) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (row, &id) in ids.iter().enumerate() {
            if index.insert(id, row).is_some() {
                return Err(usage!("example id {id} registered twice"));
            }
        }
        let cells = ids.len() * levels.len();
        Ok(MissTable {
            ids,
            index,
            levels,
            misses: vec![0; cells],
            last_correct: vec![None; cells],
            epochs_observed: 0,
        })
    }

    /// Table with preset counts, `counts[row][level]`. Used for fixtures and
    /// for reloading exported tables.
    pub fn from_counts(ids: Vec<u64>, levels: QuantLevels, counts: &[Vec<u32>], epochs_observed: u32) -> Result<Self> {
        let mut table = MissTable::new(ids, levels)?;
        if counts.len() != table.ids.len() {
            return Err(usage!(
                "expected {} rows of counts, got {}",
                table.ids.len(),
                counts.len()
            ));
        }
        let width = table.levels.len();
        for (row, c) in counts.iter().enumerate() {
            if c.len() != width {
                return Err(usage!("row {row}: expected {width} level counts, got {}", c.len()));
            }
            if c.iter().any(|&m| m > epochs_observed) {
                return Err(usage!(
                    "row {row}: miss count exceeds the {epochs_observed} observed epochs"
                ));
            }
            table.misses[row * width..][..width].copy_from_slice(c);
        }
        table.epochs_observed = epochs_observed;
        Ok(table)
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn levels(&self) -> &QuantLevels {
        &self.levels
    }

    pub fn epochs_observed(&self) -> u32 {
        self.epochs_observed
    }

    fn level_index(&self, level: Level) -> Option<usize> {
        self.levels.as_slice().iter().position(|&l| l == level)
    }

    pub fn misses(&self, id: u64, level: Level) -> Option<u32> {
        let row = *self.index.get(&id)?;
        let col = self.level_index(level)?;
        Some(self.misses[row * self.levels.len() + col])
    }

    /// Sum of an example's misses over all levels.
    pub fn total_misses(&self, id: u64) -> Option<u32> {
        let row = *self.index.get(&id)?;
        let w = self.levels.len();
        Some(self.misses[row * w..][..w].iter().sum())
    }

    /// `(id, level, misses)` for every cell, row-major.
    pub fn entries(&self) -> impl Iterator<Item = (u64, Level, u32)> + '_ {
        let levels = self.levels.as_slice();
        self.ids.iter().enumerate().flat_map(move |(row, &id)| {
            levels
                .iter()
                .enumerate()
                .map(move |(col, &l)| (id, l, self.misses[row * levels.len() + col]))
        })
    }

    /// Commit one epoch of correctness flags, `correct[level][row]`.
    pub fn commit(&mut self, correct: &[Vec<bool>]) -> Result<()> {
        let width = self.levels.len();
        if correct.len() != width || correct.iter().any(|c| c.len() != self.ids.len()) {
            return Err(usage!("correctness flags do not match the table shape"));
        }
        for (col, flags) in correct.iter().enumerate() {
            for (row, &now) in flags.iter().enumerate() {
                let cell = row * width + col;
                if self.last_correct[cell] == Some(true) && !now {
                    self.misses[cell] += 1;
                }
                self.last_correct[cell] = Some(now);
            }
        }
        self.epochs_observed += 1;
        Ok(())
    }

    /// Evaluate every tracked level's proxy of `model` on `data` and commit.
    pub fn observe_epoch(&mut self, model: &FpModel, data: &[Example]) -> Result<()> {
        self.observe_epoch_counted(model, data, &mut OpCounts::default())
    }

    pub fn observe_epoch_counted(&mut self, model: &FpModel, data: &[Example], counts: &mut OpCounts) -> Result<()> {
        let rows = self.rows_for(data)?;
        let mut correct = Vec::with_capacity(self.levels.len());
        for level in self.levels.as_slice() {
            let proxy = level.proxy(model)?;
            let mut flags = vec![false; self.ids.len()];
            for (ex, &row) in data.iter().zip(&rows) {
                flags[row] = proxy.forward_counted(&ex.features, counts)?.label == ex.label;
            }
            correct.push(flags);
        }
        self.commit(&correct)
    }

    /// Table row of every example; the examples must be exactly the
    /// registered ids, in any order.
    pub(crate) fn rows_for(&self, data: &[Example]) -> Result<Vec<usize>> {
        if data.len() != self.ids.len() {
            return Err(usage!(
                "table tracks {} examples but {} were supplied",
                self.ids.len(),
                data.len()
            ));
        }
        let mut seen = vec![false; self.ids.len()];
        data.iter()
            .map(|ex| {
                let row = *self
                    .index
                    .get(&ex.id)
                    .ok_or_else(|| usage!("example {} is not registered in the miss table", ex.id))?;
                if core::mem::replace(&mut seen[row], true) {
                    return Err(usage!("example {} supplied twice", ex.id));
                }
                Ok(row)
            })
            .collect()
    }

    /// Miss distribution for one level, or all levels summed bin by bin.
    pub fn pmf(&self, which: PmfLevel) -> Result<MissPmf> {
        let cols = self.columns(which)?;
        let width = self.levels.len();
        let mut bins = BTreeMap::new();
        for row in 0..self.ids.len() {
            for &col in &cols {
                *bins.entry(self.misses[row * width + col]).or_insert(0u64) += 1;
            }
        }
        Ok(MissPmf::from_bins(which, bins))
    }

    /// Distinct ids per miss count. For the summed distribution an example
    /// belongs to every bin one of its levels falls in.
    pub fn bin_members(&self, which: PmfLevel) -> Result<BTreeMap<u32, Vec<u64>>> {
        let cols = self.columns(which)?;
        let width = self.levels.len();
        let mut members: BTreeMap<u32, Vec<u64>> = BTreeMap::new();
        for (row, &id) in self.ids.iter().enumerate() {
            let mut ks: Vec<u32> = cols.iter().map(|&c| self.misses[row * width + c]).collect();
            ks.sort_unstable();
            ks.dedup();
            for k in ks {
                members.entry(k).or_default().push(id);
            }
        }
        Ok(members)
    }

    fn columns(&self, which: PmfLevel) -> Result<Vec<usize>> {
        match which {
            PmfLevel::Summed => Ok((0..self.levels.len()).collect()),
            PmfLevel::Level(l) => self
                .level_index(l)
                .map(|c| vec![c])
                .ok_or_else(|| usage!("level {l} is not tracked by this table")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn levels() -> QuantLevels {
        QuantLevels::new(vec![Level::Bits(2), Level::Bits(4), Level::Bits(8)]).unwrap()
    }

    fn flags(table: &MissTable, level: usize, row: usize, value: bool) -> Vec<Vec<bool>> {
        let n = table.ids().len();
        let mut f = vec![vec![true; n]; table.levels().len()];
        f[level][row] = value;
        f
    }

    #[test]
    fn first_epoch_counts_nothing() {
        let mut t = MissTable::new(vec![1, 2], levels()).unwrap();
        t.commit(&[vec![false, true], vec![true, false], vec![false, false]])
            .unwrap();
        assert!(t.entries().all(|(_, _, m)| m == 0));
    }

    #[test]
    fn single_level_transition() {
        let mut t = MissTable::new(vec![10, 11], levels()).unwrap();
        t.commit(&flags(&t, 1, 0, true)).unwrap();
        t.commit(&flags(&t, 1, 0, false)).unwrap();
        assert_eq!(t.misses(10, Level::Bits(4)), Some(1));
        assert_eq!(t.misses(10, Level::Bits(2)), Some(0));
        assert_eq!(t.misses(10, Level::Bits(8)), Some(0));
    }

    #[test]
    fn alternating_sequence_two_misses() {
        let lv = QuantLevels::new(vec![Level::Bits(4)]).unwrap();
        let mut t = MissTable::new(vec![0], lv).unwrap();
        for tp in [true, false, true, false] {
            t.commit(&[vec![tp]]).unwrap();
        }
        assert_eq!(t.misses(0, Level::Bits(4)), Some(2));
        assert_eq!(t.epochs_observed(), 4);
    }

    #[test]
    fn never_correct_never_misses() {
        let lv = QuantLevels::new(vec![Level::Bits(4)]).unwrap();
        let mut t = MissTable::new(vec![0], lv).unwrap();
        for _ in 0..5 {
            t.commit(&[vec![false]]).unwrap();
        }
        assert_eq!(t.pmf(PmfLevel::Summed).unwrap().bins, vec![(0, 1)]);
    }

    #[test]
    fn all_zero_pmf() {
        let t = MissTable::new(vec![1, 2, 3], levels()).unwrap();
        let p = t.pmf(PmfLevel::Level(Level::Bits(2))).unwrap();
        assert_eq!(p.bins, vec![(0, 3)]);
        assert_eq!(p.max_misses(), 0);
        assert_eq!(t.pmf(PmfLevel::Summed).unwrap().total(), 9);
    }

    #[test]
    fn four_samples_three_levels_summed() {
        // QM per sample at levels (2, 4, 8).
        let counts = vec![vec![1, 0, 2], vec![3, 1, 1], vec![2, 2, 0], vec![1, 3, 1]];
        let t = MissTable::from_counts(vec![0, 1, 2, 3], levels(), &counts, 5).unwrap();
        let by_level: Vec<MissPmf> = [2u8, 4, 8]
            .iter()
            .map(|&b| t.pmf(PmfLevel::Level(Level::Bits(b))).unwrap())
            .collect();
        assert_eq!(by_level[0].bins, vec![(1, 2), (2, 1), (3, 1)]);
        let summed = t.pmf(PmfLevel::Summed).unwrap();
        // Hand sum of the three histograms.
        assert_eq!(summed.bins, vec![(0, 2), (1, 5), (2, 3), (3, 2)]);
        assert_eq!(summed.total(), 12);
    }

    #[test]
    fn foreign_ids_rejected() {
        let mut t = MissTable::new(vec![1, 2], levels()).unwrap();
        let m = crate::nn::FpModel::new(
            crate::nn::ArchSpec::new(vec![crate::nn::LayerSpec::Dense { inputs: 1, outputs: 2 }]),
            0,
        )
        .unwrap();
        let ex = |id| Example {
            id,
            features: vec![0.0],
            label: 0,
        };
        assert!(matches!(
            t.observe_epoch(&m, &[ex(1), ex(3)]),
            Err(crate::Error::Usage(_))
        ));
        assert!(t.observe_epoch(&m, &[ex(2), ex(1)]).is_ok());
    }
}
