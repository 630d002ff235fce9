mod common;

use proptest::prelude::*;
use qcore::coreset::{apportion, info_loss, info_loss_counts, rounded_quotas, sample_qcore, update_qcore, QCoreSet};
use qcore::data::Example;
use qcore::misses::{MissPmf, MissTable, PmfLevel};
use qcore::nn::{ArchSpec, FpModel, LayerSpec, TrainConfig};
use qcore::quant::{quantize_model, Level, QuantLevels};
use qcore::rng;
use std::collections::BTreeSet;

fn one_level() -> QuantLevels {
    QuantLevels::new(vec![Level::Bits(4)]).unwrap()
}

/// Pool and single-level table with `bins[k]` examples missing `k` times.
fn fixture(bins: &[(u32, u64)]) -> (Vec<Example>, MissTable) {
    let mut pool = Vec::new();
    let mut counts = Vec::new();
    for &(k, n) in bins {
        for _ in 0..n {
            let id = pool.len() as u64;
            pool.push(Example {
                id,
                features: vec![id as f64],
                label: (id % 2) as usize,
            });
            counts.push(vec![k]);
        }
    }
    let ids = pool.iter().map(|e| e.id).collect();
    let epochs = bins.iter().map(|b| b.0).max().unwrap_or(0);
    let table = MissTable::from_counts(ids, one_level(), &counts, epochs).unwrap();
    (pool, table)
}

fn sample(bins: &[(u32, u64)], budget: usize, seed: u64) -> QCoreSet {
    let (pool, table) = fixture(bins);
    let pmf = table.pmf(PmfLevel::Level(Level::Bits(4))).unwrap();
    sample_qcore(&pool, &table, &pmf, budget, seed).unwrap()
}

#[test]
fn bin_of_480_keeps_48() {
    let core = sample(&[(0, 480), (1, 320), (2, 150), (3, 50)], 100, 7);
    assert!((core.lambda - 0.1).abs() < 1e-12);
    let bin = core.bins.iter().find(|b| b.population == 480).unwrap();
    assert_eq!((bin.quota, bin.selected), (48, 48));
    assert_eq!(core.len(), 100);
}

#[test]
fn lambda_one_takes_everything() {
    let bins = [(0, 5), (1, 3), (4, 2)];
    let core = sample(&bins, 10, 1);
    assert_eq!(core.ids(), (0..10).collect::<Vec<u64>>());

    // Summed distribution over several levels.
    let levels = QuantLevels::new(vec![Level::Bits(2), Level::Bits(8)]).unwrap();
    let counts = vec![vec![0, 1], vec![2, 2], vec![1, 0], vec![3, 1]];
    let table = MissTable::from_counts(vec![0, 1, 2, 3], levels, &counts, 3).unwrap();
    let pool: Vec<Example> = (0..4)
        .map(|i| Example {
            id: i,
            features: vec![0.0],
            label: 0,
        })
        .collect();
    let pmf = table.pmf(PmfLevel::Summed).unwrap();
    let core = sample_qcore(&pool, &table, &pmf, 4, 3).unwrap();
    assert_eq!(core.ids(), vec![0, 1, 2, 3]);
}

#[test]
fn table3_instance() {
    let bins = [(1, 2), (2, 3), (3, 9), (4, 4), (5, 2)];
    assert_eq!(rounded_quotas(&bins, 4), vec![0, 1, 2, 1, 0]);
    let core = sample(&bins, 4, 11);
    let selected: Vec<u64> = core.bins.iter().map(|b| b.selected).collect();
    assert_eq!(selected, vec![0, 1, 2, 1, 0]);
    let pmf = MissPmf::from_bins(PmfLevel::Summed, bins);
    let report = info_loss(&pmf, 0.2).unwrap();
    assert_eq!((report.full_mean, report.core_mean, report.bound), (3.05, 3.0, 5));
    assert!((report.epsilon - 0.05).abs() < 1e-15);
    assert_eq!(info_loss_counts(&pmf, &core.selected_counts()).unwrap(), report);
}

#[test]
fn info_loss_matches_brute_force_oracle() {
    let mut rng = rng::stream(2024, &[1]);
    for _ in 0..500 {
        let (bins, lambda) = common::random_instance(&mut rng);
        let (full, core, eps, k) = common::brute_info_loss(&bins, lambda);
        let pmf = MissPmf::from_bins(PmfLevel::Summed, bins.clone());
        let r = info_loss(&pmf, lambda).unwrap();
        assert!(r.epsilon <= r.bound as f64);
        assert_eq!(r.bound, k);
        assert!((r.full_mean - full).abs() < 1e-12);
        assert!((r.core_mean - core).abs() < 1e-12);
        assert!((r.epsilon - eps).abs() < 1e-12, "{bins:?} {lambda}");
    }
}

#[test]
fn independent_rounding_can_exceed_the_bound() {
    // Three half-up roundings against one slot.
    let pmf = MissPmf::from_bins(PmfLevel::Summed, [(0, 1), (5, 2), (6, 2)]);
    let (_, _, eps, k) = common::brute_info_loss(&pmf.bins, 0.27);
    assert!(eps > k as f64);
    assert!(matches!(info_loss(&pmf, 0.27), Err(qcore::Error::Numeric(_))));
}

#[test]
fn budget_above_pool_is_usage_error() {
    let (pool, table) = fixture(&[(0, 3)]);
    let pmf = table.pmf(PmfLevel::Level(Level::Bits(4))).unwrap();
    assert!(matches!(
        sample_qcore(&pool, &table, &pmf, 4, 0),
        Err(qcore::Error::Usage(_))
    ));
}

#[test]
fn exhausted_summed_bins_spill_with_warning() {
    // Both examples miss twice at one level and never at the other, so bin 2
    // has two members but bin 0 shares them.
    let levels = QuantLevels::new(vec![Level::Bits(2), Level::Bits(8)]).unwrap();
    let counts = vec![vec![2, 0], vec![2, 0], vec![0, 0]];
    let table = MissTable::from_counts(vec![0, 1, 2], levels, &counts, 2).unwrap();
    let pool: Vec<Example> = (0..3)
        .map(|i| Example {
            id: i,
            features: vec![0.0],
            label: 0,
        })
        .collect();
    let pmf = table.pmf(PmfLevel::Summed).unwrap();
    assert_eq!(pmf.bins, vec![(0, 4), (2, 2)]);
    let mut spilled = 0;
    for seed in 0..20 {
        let core = sample_qcore(&pool, &table, &pmf, 3, seed).unwrap();
        assert_eq!(core.len(), 3);
        assert_eq!(core.bins.iter().map(|b| b.quota).sum::<u64>(), 3);
        assert_eq!(core.bins.iter().map(|b| b.selected).sum::<u64>(), 3);
        if !core.warnings.is_empty() {
            spilled += 1;
            assert!(core.warnings[0].contains("k=2"));
        }
    }
    assert!(spilled > 0);
}

fn pmf_strategy() -> impl Strategy<Value = Vec<(u32, u64)>> {
    prop::collection::btree_map(0u32..12, 1u64..300, 1..10).prop_map(|m| m.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn quotas_sum_to_budget(bins in pmf_strategy(), frac in 0.0f64..=1.0) {
        let total: u64 = bins.iter().map(|b| b.1).sum();
        let budget = (frac * total as f64) as u64;
        let q = apportion(&bins, budget);
        prop_assert_eq!(q.iter().sum::<u64>(), budget);
        for (&(_, n), &qk) in bins.iter().zip(&q) {
            let exact = budget as f64 * n as f64 / total as f64;
            prop_assert!((qk as f64) >= exact.floor() && (qk as f64) <= exact.floor() + 1.0);
            prop_assert!(qk <= n);
        }
    }

    #[test]
    fn single_level_bins_are_faithful(bins in pmf_strategy(), frac in 0.01f64..=1.0, seed in any::<u64>()) {
        let total: u64 = bins.iter().map(|b| b.1).sum();
        let budget = ((frac * total as f64) as usize).max(1);
        let core = sample(&bins, budget, seed);
        prop_assert_eq!(core.len(), budget);
        prop_assert!(core.warnings.is_empty());
        for b in &core.bins {
            prop_assert_eq!(b.selected, b.quota);
        }
        let ids: BTreeSet<u64> = core.ids().into_iter().collect();
        prop_assert_eq!(ids.len(), budget);
        prop_assert!(ids.iter().all(|&id| id < total));
        let pmf = MissPmf::from_bins(PmfLevel::Summed, bins.clone());
        let r = info_loss_counts(&pmf, &core.selected_counts()).unwrap();
        prop_assert!(r.epsilon <= r.bound as f64);
        prop_assert_eq!(sample(&bins, budget, seed), core);
    }
}

fn tiny_arch() -> ArchSpec {
    ArchSpec::new(vec![
        LayerSpec::Dense { inputs: 2, outputs: 4 },
        LayerSpec::Relu,
        LayerSpec::Dense { inputs: 4, outputs: 2 },
    ])
}

fn points(first: u64, n: usize, label: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example {
            id: first + i as u64,
            features: vec![i as f64 * 0.1, 1.0 - i as f64 * 0.05],
            label,
        })
        .collect()
}

fn initial_core(pool: &[Example], budget: usize) -> QCoreSet {
    let table = MissTable::new(pool.iter().map(|e| e.id).collect(), one_level()).unwrap();
    let pmf = table.pmf(PmfLevel::Level(Level::Bits(4))).unwrap();
    sample_qcore(pool, &table, &pmf, budget, 9).unwrap()
}

#[test]
fn update_keeps_the_budget_for_any_batch_size() {
    let pool = points(0, 40, 0);
    let core = initial_core(&pool, 10);
    let qm = quantize_model(&FpModel::new(tiny_arch(), 1).unwrap(), 4).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.1,
        epochs: 3,
        batch_size: 8,
        seed: 2,
    };
    for n in [1, 4, 10, 25, 60] {
        let batch = points(1000, n, 1);
        let next = update_qcore(&core, &batch, &qm, &cfg, 3).unwrap();
        assert_eq!(next.len(), 10, "batch of {n}");
        let ids: BTreeSet<u64> = next.ids().into_iter().collect();
        assert_eq!(ids.len(), 10);
        assert_eq!(next, update_qcore(&core, &batch, &qm, &cfg, 3).unwrap());
    }
    assert!(matches!(
        update_qcore(&core, &[], &qm, &cfg, 3),
        Err(qcore::Error::Usage(_))
    ));
}

#[test]
fn always_wrong_examples_land_in_bin_zero() {
    // A zero model predicts class 0 everywhere and never moves under a
    // zero learning rate.
    let zeros = tiny_arch().tensor_slots().iter().map(|s| vec![0.0; s.len]).collect();
    let fp = FpModel::from_parts(tiny_arch(), zeros, 0, 0).unwrap();
    let qm = quantize_model(&fp, 4).unwrap();
    let pool = points(0, 30, 0);
    let core = initial_core(&pool, 10);
    let batch = points(500, 20, 1);
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 4,
        batch_size: 8,
        seed: 0,
    };
    let next = update_qcore(&core, &batch, &qm, &cfg, 1).unwrap();
    assert!(next.member_bins.iter().all(|&k| k == 0));
    assert_eq!(next.selected_counts(), core.selected_counts());
}
