//! Distribution-matched coreset construction and maintenance.
//!
//! A coreset of `budget` examples is drawn so that its histogram of miss
//! counts follows the pool's. Per-bin quotas are apportioned with the
//! largest-remainder method over the exact rationals `budget * N_k / total`,
//! ties going to the bin with more misses. Members of each bin are drawn
//! uniformly without replacement. When a bin runs out of unused examples its
//! shortfall moves to the nearest bin that still has some.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::data::Example;
use crate::error::{numeric, usage, Result};
use crate::math;
use crate::misses::{MissPmf, MissTable, PmfLevel};
use crate::nn::{OpCounts, TrainConfig};
use crate::quant::{dequantize, Level, QuantModel};
use crate::rng;

/// Quota bookkeeping for one miss-count bin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinQuota {
    /// Miss count `k`.
    pub misses: u32,
    /// `N_k` in the source distribution.
    pub population: u64,
    /// Apportioned quota.
    pub quota: u64,
    /// Members actually drawn from this bin, spills included.
    pub selected: u64,
}

/// A fixed-size, distribution-matched subset of a data pool.
#[derive(Debug, Clone, PartialEq)]
pub struct QCoreSet {
    pub members: Vec<Example>,
    /// Bin each member was drawn from, aligned with `members`.
    pub member_bins: Vec<u32>,
    pub size_budget: usize,
    /// `size_budget / |pool|`.
    pub lambda: f64,
    pub seed: u64,
    pub bins: Vec<BinQuota>,
    /// Distribution the members were sampled from.
    pub source_pmf: MissPmf,
    pub warnings: Vec<String>,
}

impl QCoreSet {
    pub fn ids(&self) -> Vec<u64> {
        self.members.iter().map(|e| e.id).collect()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `(k, selected)` per bin.
    pub fn selected_counts(&self) -> Vec<(u32, u64)> {
        self.bins.iter().map(|b| (b.misses, b.selected)).collect()
    }
}

/// Largest-remainder apportionment of `budget` over `(k, N_k)` bins.
///
/// Each bin gets `floor(budget * N_k / total)`; the remaining seats go to the
/// largest fractional parts, ties broken towards larger `k`.
pub fn apportion(bins: &[(u32, u64)], budget: u64) -> Vec<u64> {
    let total: u64 = bins.iter().map(|&(_, n)| n).sum();
    if total == 0 {
        return vec![0; bins.len()];
    }
    let mut quotas = Vec::with_capacity(bins.len());
    let mut remainders = Vec::with_capacity(bins.len());
    for (i, &(k, n)) in bins.iter().enumerate() {
        let share = budget as u128 * n as u128;
        quotas.push((share / total as u128) as u64);
        remainders.push((share % total as u128, k, i));
    }
    let left = budget - quotas.iter().sum::<u64>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(b.1.cmp(&a.1)));
    for &(_, _, i) in remainders.iter().take(left as usize) {
        quotas[i] += 1;
    }
    quotas
}

/// `round(budget * N_k / total)` per bin, half away from zero, in exact
/// integer arithmetic. These are the unadjusted quotas.
pub fn rounded_quotas(bins: &[(u32, u64)], budget: u64) -> Vec<u64> {
    let total: u128 = bins.iter().map(|&(_, n)| n as u128).sum();
    if total == 0 {
        return vec![0; bins.len()];
    }
    bins.iter()
        .map(|&(_, n)| ((2 * budget as u128 * n as u128 + total) / (2 * total)) as u64)
        .collect()
}

struct Drawn {
    picks: Vec<(usize, u32)>,
    bins: Vec<BinQuota>,
    warnings: Vec<String>,
}

/// Draw `budget` distinct pool indices following `pmf`, with
/// `members[k]` listing the distinct candidates of bin `k`.
fn draw(pmf: &MissPmf, members: &BTreeMap<u32, Vec<usize>>, budget: usize, seed: u64) -> Result<Drawn> {
    let quotas = apportion(&pmf.bins, budget as u64);
    let mut queues: Vec<(u32, Vec<usize>, usize)> = pmf
        .bins
        .iter()
        .map(|&(k, _)| {
            let mut q = members.get(&k).cloned().unwrap_or_default();
            q.shuffle(&mut rng::stream(seed, &[rng::SAMPLE, k as u64]));
            (k, q, 0)
        })
        .collect();
    let mut taken = BTreeSet::new();
    let mut picks = Vec::with_capacity(budget);
    let mut bins: Vec<BinQuota> = pmf
        .bins
        .iter()
        .zip(&quotas)
        .map(|(&(k, n), &q)| BinQuota {
            misses: k,
            population: n,
            quota: q,
            selected: 0,
        })
        .collect();

    let next = |queue: &mut (u32, Vec<usize>, usize), taken: &mut BTreeSet<usize>| -> Option<usize> {
        while queue.2 < queue.1.len() {
            let idx = queue.1[queue.2];
            queue.2 += 1;
            if taken.insert(idx) {
                return Some(idx);
            }
        }
        None
    };

    let mut deficits = Vec::new();
    for b in 0..queues.len() {
        let mut got = 0;
        while got < quotas[b] {
            match next(&mut queues[b], &mut taken) {
                Some(idx) => {
                    picks.push((idx, queues[b].0));
                    got += 1;
                }
                None => break,
            }
        }
        bins[b].selected = got;
        if got < quotas[b] {
            deficits.push((b, quotas[b] - got));
        }
    }

    let mut warnings = Vec::new();
    for (from, mut missing) in deficits {
        let k_from = queues[from].0 as i64;
        let mut order: Vec<usize> = (0..queues.len()).filter(|&b| b != from).collect();
        // nearest bin first, larger k on ties
        order.sort_by_key(|&b| {
            let k = queues[b].0 as i64;
            ((k - k_from).abs(), -k)
        });
        for b in order {
            let mut moved = 0;
            while missing > 0 {
                match next(&mut queues[b], &mut taken) {
                    Some(idx) => {
                        picks.push((idx, queues[b].0));
                        missing -= 1;
                        moved += 1;
                    }
                    None => break,
                }
            }
            if moved > 0 {
                bins[b].selected += moved;
                warnings.push(format!(
                    "bin k={} exhausted; {moved} of its quota drawn from bin k={}",
                    k_from, queues[b].0
                ));
            }
            if missing == 0 {
                break;
            }
        }
        if missing > 0 {
            return Err(usage!("pool holds too few distinct examples for a budget of {budget}"));
        }
    }
    Ok(Drawn { picks, bins, warnings })
}

/// Sample a coreset of `budget` examples from `pool` following `pmf`, a
/// distribution built from `table` over the same pool.
pub fn sample_qcore(pool: &[Example], table: &MissTable, pmf: &MissPmf, budget: usize, seed: u64) -> Result<QCoreSet> {
    if budget == 0 {
        return Err(usage!("coreset budget must be positive"));
    }
    if budget > pool.len() {
        return Err(usage!("budget {budget} exceeds the pool of {} examples", pool.len()));
    }
    let position: BTreeMap<u64, usize> = pool.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
    let mut members = BTreeMap::new();
    for (k, ids) in table.bin_members(pmf.level)? {
        let idx = ids
            .iter()
            .map(|id| {
                position
                    .get(id)
                    .copied()
                    .ok_or_else(|| usage!("miss table example {id} is not in the pool"))
            })
            .collect::<Result<Vec<_>>>()?;
        members.insert(k, idx);
    }
    let drawn = draw(pmf, &members, budget, seed)?;
    Ok(assemble(
        pool,
        drawn,
        budget,
        budget as f64 / pool.len() as f64,
        seed,
        pmf.clone(),
    ))
}

fn assemble(pool: &[Example], drawn: Drawn, budget: usize, lambda: f64, seed: u64, pmf: MissPmf) -> QCoreSet {
    let mut picks = drawn.picks;
    picks.sort_unstable_by_key(|&(i, _)| pool[i].id);
    QCoreSet {
        members: picks.iter().map(|&(i, _)| pool[i].clone()).collect(),
        member_bins: picks.iter().map(|&(_, k)| k).collect(),
        size_budget: budget,
        lambda,
        seed,
        bins: drawn.bins,
        source_pmf: pmf,
        warnings: drawn.warnings,
    }
}

/// Uniform sample of `budget` examples, ignoring miss counts.
pub fn sample_uniform(pool: &[Example], budget: usize, seed: u64) -> Result<QCoreSet> {
    if budget == 0 || budget > pool.len() {
        return Err(usage!("budget {budget} invalid for a pool of {}", pool.len()));
    }
    let pmf = MissPmf::from_bins(PmfLevel::Summed, [(0, pool.len() as u64)]);
    let mut members = BTreeMap::new();
    members.insert(0, (0..pool.len()).collect());
    let drawn = draw(&pmf, &members, budget, seed)?;
    Ok(assemble(
        pool,
        drawn,
        budget,
        budget as f64 / pool.len() as f64,
        seed,
        pmf,
    ))
}

/// Information loss of a coreset against the full miss distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InfoLossReport {
    /// Mean miss count over the full data.
    pub full_mean: f64,
    /// Mean miss count over the coreset.
    pub core_mean: f64,
    /// `|full_mean - core_mean|`.
    pub epsilon: f64,
    /// Largest miss count present, which bounds `epsilon`.
    pub bound: u32,
}

fn finish_loss(pmf: &MissPmf, core_weighted: f64, core_size: f64) -> Result<InfoLossReport> {
    if !(core_size > 0.0) {
        return Err(usage!("information loss of an empty coreset"));
    }
    let total = pmf.total();
    if total == 0 {
        return Err(usage!("information loss of an empty distribution"));
    }
    let full: f64 = pmf.bins.iter().map(|&(k, n)| k as f64 * n as f64).sum();
    let full_mean = full / total as f64;
    let core_mean = core_weighted / core_size;
    let epsilon = (full_mean - core_mean).abs();
    let bound = pmf.max_misses();
    if epsilon > bound as f64 {
        return Err(numeric!("information loss {epsilon} exceeds its bound {bound}"));
    }
    Ok(InfoLossReport {
        full_mean,
        core_mean,
        epsilon,
        bound,
    })
}

/// Information loss of the coreset a fraction `lambda` of the data would
/// get: each bin keeps `round(lambda * N_k)` examples and the coreset mean is
/// normalised by `round(lambda * |D|)`.
pub fn info_loss(pmf: &MissPmf, lambda: f64) -> Result<InfoLossReport> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(usage!("lambda must lie in (0, 1]"));
    }
    let core: f64 = pmf
        .bins
        .iter()
        .map(|&(k, n)| k as f64 * math::round(lambda * n as f64))
        .sum();
    finish_loss(pmf, core, math::round(lambda * pmf.total() as f64))
}

/// Information loss of a concrete coreset given its per-bin member counts.
pub fn info_loss_counts(pmf: &MissPmf, core_counts: &[(u32, u64)]) -> Result<InfoLossReport> {
    let size: u64 = core_counts.iter().map(|&(_, c)| c).sum();
    let weighted: f64 = core_counts.iter().map(|&(k, c)| k as f64 * c as f64).sum();
    finish_loss(pmf, weighted, size as f64)
}

/// One calibration epoch over a quantized model. The coreset update shadows
/// calibration with one of these to observe how examples fare while the
/// model moves.
pub trait CalibrationStep {
    fn step(&mut self, qm: &mut QuantModel, data: &[Example], counts: &mut OpCounts) -> Result<()>;
}

/// Refresh `core` with a stream batch.
///
/// The coreset is replicated up to the batch size, a scratch copy of `qm` is
/// calibrated for `epochs` epochs on the coreset plus the batch through
/// `step`, and misses at the model's own level are counted on every union
/// entry after each epoch (the uncalibrated model seeds the previous state).
/// A new coreset of the original budget is then sampled from the union with
/// the union's miss distribution. Replicas share an id and collapse to one
/// member.
pub fn update_qcore_with(
    core: &QCoreSet,
    batch: &[Example],
    qm: &QuantModel,
    epochs: u32,
    seed: u64,
    step: &mut dyn CalibrationStep,
    counts: &mut OpCounts,
) -> Result<QCoreSet> {
    if batch.is_empty() {
        return Err(usage!("cannot update the coreset with an empty batch"));
    }
    if core.is_empty() {
        return Err(usage!("cannot update an empty coreset"));
    }
    // Distinct entries: coreset members first, then batch examples.
    let mut pool: Vec<Example> = Vec::with_capacity(core.len() + batch.len());
    let mut seen = BTreeSet::new();
    for ex in core.members.iter().chain(batch) {
        if seen.insert(ex.id) {
            pool.push(ex.clone());
        }
    }
    // Multiplicity of each distinct entry in the scaled union.
    let mut multiplicity = vec![0u64; pool.len()];
    let reps = batch.len().div_ceil(core.len()).max(1);
    let scaled = (core.len() * reps).min(batch.len().max(core.len()));
    let core_pos: BTreeMap<u64, usize> = pool.iter().enumerate().map(|(i, e)| (e.id, i)).collect();
    for ex in core.members.iter().cycle().take(scaled) {
        multiplicity[core_pos[&ex.id]] += 1;
    }
    for ex in batch {
        multiplicity[core_pos[&ex.id]] += 1;
    }

    let mut scratch = qm.clone();
    let mut last: Vec<bool> = correctness(&scratch, &pool, counts)?;
    let mut misses = vec![0u32; pool.len()];
    for _ in 0..epochs {
        step.step(&mut scratch, &pool, counts)?;
        let now = correctness(&scratch, &pool, counts)?;
        for i in 0..pool.len() {
            if last[i] && !now[i] {
                misses[i] += 1;
            }
        }
        last = now;
    }

    let level = PmfLevel::Level(Level::Bits(qm.bit_width));
    let pmf = MissPmf::from_bins(level, misses.iter().zip(&multiplicity).map(|(&k, &m)| (k, m)));
    let mut members: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &k) in misses.iter().enumerate() {
        members.entry(k).or_default().push(i);
    }
    let budget = core.size_budget;
    if pool.len() < budget {
        return Err(usage!("coreset and batch hold fewer than {budget} distinct examples"));
    }
    let drawn = draw(&pmf, &members, budget, seed)?;
    let union_size: u64 = multiplicity.iter().sum();
    Ok(assemble(
        &pool,
        drawn,
        budget,
        budget as f64 / union_size as f64,
        seed,
        pmf,
    ))
}

fn correctness(qm: &QuantModel, data: &[Example], counts: &mut OpCounts) -> Result<Vec<bool>> {
    let fp = dequantize(qm);
    data.iter()
        .map(|ex| Ok(fp.forward_counted(&ex.features, counts)?.label == ex.label))
        .collect()
}

/// [`update_qcore_with`] shadowing straight-through back-propagation
/// calibration configured by `cfg` (its `epochs` is the shadow length).
pub fn update_qcore(
    core: &QCoreSet,
    batch: &[Example],
    qm: &QuantModel,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<QCoreSet> {
    let mut step = crate::bitflip::SteCalibrator::new(cfg.clone());
    update_qcore_with(core, batch, qm, cfg.epochs, seed, &mut step, &mut OpCounts::default())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table3_quotas() {
        let bins = [(1, 2), (2, 3), (3, 9), (4, 4), (5, 2)];
        assert_eq!(rounded_quotas(&bins, 4), vec![0, 1, 2, 1, 0]);
        assert_eq!(apportion(&bins, 4), vec![0, 1, 2, 1, 0]);
    }

    #[test]
    fn ties_go_to_harder_bins() {
        // 3 bins of 1 example, 2 seats: every remainder ties.
        assert_eq!(apportion(&[(0, 1), (1, 1), (2, 1)], 2), vec![0, 1, 1]);
    }

    #[test]
    fn table3_info_loss() {
        let pmf = MissPmf::from_bins(PmfLevel::Summed, [(1, 2), (2, 3), (3, 9), (4, 4), (5, 2)]);
        let r = info_loss(&pmf, 0.2).unwrap();
        assert!((r.full_mean - 3.05).abs() < 1e-12);
        assert!((r.core_mean - 3.0).abs() < 1e-12);
        assert!((r.epsilon - 0.05).abs() < 1e-12);
        assert_eq!(r.bound, 5);
        let c = info_loss_counts(&pmf, &[(1, 0), (2, 1), (3, 2), (4, 1), (5, 0)]).unwrap();
        assert_eq!(c, r);
    }

    #[test]
    fn lambda_one_is_lossless() {
        let pmf = MissPmf::from_bins(PmfLevel::Summed, [(0, 7), (2, 3), (6, 1)]);
        assert_eq!(info_loss(&pmf, 1.0).unwrap().epsilon, 0.0);
    }

    #[test]
    fn empty_core_is_usage_error() {
        let pmf = MissPmf::from_bins(PmfLevel::Summed, [(1, 2)]);
        assert!(matches!(info_loss_counts(&pmf, &[(1, 0)]), Err(crate::Error::Usage(_))));
        assert!(matches!(info_loss(&pmf, 0.1), Err(crate::Error::Usage(_))));
    }
}
