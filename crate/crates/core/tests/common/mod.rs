#![allow(dead_code)]

use qcore::rng;
use rand::Rng;

/// Random `(k, N_k)` histogram with `K <= 8` and `|D| <= 1000`, plus a
/// fraction `lambda` leaving at least one coreset slot.
pub fn random_instance(rng: &mut rng::Rng) -> (Vec<(u32, u64)>, f64) {
    loop {
        let k_max = rng.random_range(0..=8u32);
        let bins: Vec<(u32, u64)> = (0..=k_max)
            .map(|k| (k, rng.random_range(0..=110u64)))
            .filter(|&(_, n)| n > 0)
            .collect();
        let total: u64 = bins.iter().map(|b| b.1).sum();
        if total == 0 {
            continue;
        }
        let lambda: f64 = rng.random_range(0.0..=1.0);
        if lambda > 0.0 && (lambda * total as f64 + 0.5).floor() >= 1.0 {
            return (bins, lambda);
        }
    }
}

/// Information loss recomputed from the expanded per-example miss list.
/// Returns `(full_mean, core_mean, epsilon, k_max)`.
pub fn brute_info_loss(bins: &[(u32, u64)], lambda: f64) -> (f64, f64, f64, u32) {
    let mut all = Vec::new();
    let mut core = Vec::new();
    for &(k, n) in bins {
        all.extend(std::iter::repeat_n(k, n as usize));
        let keep = (lambda * n as f64 + 0.5).floor() as usize;
        core.extend(std::iter::repeat_n(k, keep));
    }
    let full = all.iter().map(|&k| k as f64).sum::<f64>() / all.len() as f64;
    let size = (lambda * all.len() as f64 + 0.5).floor();
    let core_mean = core.iter().map(|&k| k as f64).sum::<f64>() / size;
    let k_max = bins.iter().filter(|b| b.1 > 0).map(|b| b.0).max().unwrap_or(0);
    (full, core_mean, (full - core_mean).abs(), k_max)
}
