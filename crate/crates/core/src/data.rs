//! Labelled datasets, synthetic domain-shift pairs and stream batching.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape, usage, Result};
use crate::math;
use crate::rng;

/// A labelled feature vector with an identifier that is stable across runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub num_classes: usize,
    pub domain_tag: String,
}

impl Dataset {
    /// Build a dataset, checking id uniqueness, label range and widths.
    pub fn new(examples: Vec<Example>, num_classes: usize, domain_tag: impl Into<String>) -> Result<Self> {
        let data = Dataset {
            examples,
            num_classes,
            domain_tag: domain_tag.into(),
        };
        data.validate()?;
        Ok(data)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let width = self.examples.first().map(|e| e.features.len());
        for (row, ex) in self.examples.iter().enumerate() {
            if !seen.insert(ex.id) {
                return Err(usage!("duplicate example id {}", ex.id));
            }
            if ex.label >= self.num_classes {
                return Err(usage!(
                    "example {} has label {} outside [0, {})",
                    ex.id,
                    ex.label,
                    self.num_classes
                ));
            }
            if Some(ex.features.len()) != width {
                return Err(shape!(
                    "row {row}: {} features, expected {}",
                    ex.features.len(),
                    width.unwrap_or(0)
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.features.len())
    }

    pub fn ids(&self) -> Vec<u64> {
        self.examples.iter().map(|e| e.id).collect()
    }

    fn with_examples(&self, examples: Vec<Example>) -> Dataset {
        Dataset {
            examples,
            num_classes: self.num_classes,
            domain_tag: self.domain_tag.clone(),
        }
    }

    /// Seeded split into `(train, test)` with `round(len * test_fraction)`
    /// test examples (at least one of each when possible).
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(usage!("test fraction must lie in [0, 1)"));
        }
        if self.len() < 2 {
            return Err(usage!("need at least 2 examples to split"));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng::stream(seed, &[rng::SPLIT, 0]));
        let n_test = (math::round(self.len() as f64 * test_fraction) as usize).clamp(1, self.len() - 1);
        let pick = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| self.examples[i].clone()).collect()
        };
        let test = pick(&order[..n_test]);
        let train = pick(&order[n_test..]);
        Ok((self.with_examples(train), self.with_examples(test)))
    }
}

/// A labelled chunk of the target domain plus its held-out evaluation slice.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamBatch {
    pub index: usize,
    /// Calibration examples delivered to the device.
    pub examples: Vec<Example>,
    /// Evaluation examples for this batch; never used for calibration.
    pub test: Vec<Example>,
}

/// Partition `target` into `n_batches` stream batches.
///
/// The target is shuffled and cut into `n_batches` chunks whose sizes differ
/// by at most one. Each chunk is split into a calibration slice and a test
/// slice holding `round(chunk * test_fraction)` examples, clamped so both
/// slices are nonempty.
pub fn split_stream(target: &Dataset, n_batches: usize, test_fraction: f64, seed: u64) -> Result<Vec<StreamBatch>> {
    if n_batches == 0 {
        return Err(usage!("need at least one stream batch"));
    }
    if n_batches > target.len() / 2 {
        return Err(usage!(
            "{} target examples cannot fill {n_batches} batches with a calibration and a test slice",
            target.len()
        ));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(usage!("stream test fraction must lie in (0, 1)"));
    }
    let mut order: Vec<usize> = (0..target.len()).collect();
    order.shuffle(&mut rng::stream(seed, &[rng::SPLIT, 1]));
    let base = target.len() / n_batches;
    let extra = target.len() % n_batches;
    let mut batches = Vec::with_capacity(n_batches);
    let mut start = 0;
    for index in 0..n_batches {
        let len = base + usize::from(index < extra);
        let chunk = &order[start..start + len];
        start += len;
        let n_test = (math::round(len as f64 * test_fraction) as usize).clamp(1, len - 1);
        let take = |idx: &[usize]| idx.iter().map(|&i| target.examples[i].clone()).collect();
        batches.push(StreamBatch {
            index,
            examples: take(&chunk[n_test..]),
            test: take(&chunk[..n_test]),
        });
    }
    Ok(batches)
}

/// Parameters of a synthetic source/target pair of Gaussian class clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSpec {
    pub dim: usize,
    pub classes: usize,
    pub n_source: usize,
    pub n_target: usize,
    /// Translation of every class mean in the target domain, in units of the
    /// source cluster standard deviation.
    pub shift: f64,
    pub seed: u64,
    /// Distance of each class mean from the origin.
    #[serde(default = "default_radius")]
    pub mean_radius: f64,
}

fn default_radius() -> f64 {
    3.0
}

impl DriftSpec {
    pub fn new(dim: usize, classes: usize, n_source: usize, n_target: usize, shift: f64, seed: u64) -> Self {
        DriftSpec {
            dim,
            classes,
            n_source,
            n_target,
            shift,
            seed,
            mean_radius: default_radius(),
        }
    }
}

fn random_direction(rng: &mut rng::Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = math::sqrt(v.iter().map(|x| x * x).sum());
        if norm > 1e-9 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generate a `(source, target)` pair.
///
/// The source holds `classes` unit-variance Gaussian clusters whose means sit
/// on a sphere of radius `mean_radius`. The target reuses the means translated
/// by `shift` along one seeded direction inside the span of the means, and scales each class's spread by
/// `1 + 0.1 * shift * u` with `u` uniform in `[-1, 1]`. A zero shift yields the
/// same distribution. Labels cycle through the classes; source ids are
/// `0..n_source` and target ids follow them.
pub fn make_drift_pair(spec: &DriftSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.shift >= 0.0) || !spec.shift.is_finite() {
        return Err(usage!("shift magnitude must be finite and non-negative"));
    }
    if spec.dim == 0 || spec.classes < 2 {
        return Err(usage!("need dim >= 1 and at least 2 classes"));
    }
    if spec.n_source < spec.classes || spec.n_target < spec.classes {
        return Err(usage!("each domain needs at least one example per class"));
    }
    let mut rng = rng::stream(spec.seed, &[rng::DATA, 0]);
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            random_direction(&mut rng, spec.dim)
                .into_iter()
                .map(|x| x * spec.mean_radius)
                .collect()
        })
        .collect();
    // Shift within the span of the class means so the drift moves examples
    // across the decision boundaries instead of along them.
    let weights = random_direction(&mut rng, spec.classes);
    let mut direction: Vec<f64> = (0..spec.dim)
        .map(|d| weights.iter().zip(&means).map(|(w, m)| w * m[d]).sum())
        .collect();
    let norm = math::sqrt(direction.iter().map(|x| x * x).sum());
    if norm > 1e-9 {
        direction.iter_mut().for_each(|x| *x /= norm);
    } else {
        direction = random_direction(&mut rng, spec.dim);
    }
    let spread: Vec<f64> = (0..spec.classes)
        .map(|_| {
            let u: f64 = rng.random_range(-1.0..=1.0);
            (1.0 + 0.1 * spec.shift * u).clamp(0.5, 2.0)
        })
        .collect();

    let draw = |stream: u64, n: usize, first_id: u64, offset: f64, spread: &dyn Fn(usize) -> f64| {
        let mut rng = rng::stream(spec.seed, &[rng::DATA, stream]);
        (0..n)
            .map(|i| {
                let label = i % spec.classes;
                let features = (0..spec.dim)
                    .map(|d| {
                        let z: f64 = rng.sample(StandardNormal);
                        means[label][d] + offset * direction[d] + spread(label) * z
                    })
                    .collect();
                Example {
                    id: first_id + i as u64,
                    features,
                    label,
                }
            })
            .collect::<Vec<_>>()
    };
    let source = draw(1, spec.n_source, 0, 0.0, &|_| 1.0);
    let target = draw(2, spec.n_target, spec.n_source as u64, spec.shift, &|c| spread[c]);
    Ok((
        Dataset::new(source, spec.classes, "source")?,
        Dataset::new(target, spec.classes, "target")?,
    ))
}
