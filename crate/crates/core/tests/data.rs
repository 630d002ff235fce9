use qcore::data::{make_drift_pair, split_stream, Dataset, DriftSpec, Example};
use qcore::nn::{accuracy, train_epoch, ArchSpec, FpModel, LayerSpec, OpCounts, TrainConfig};
use rand::Rng;
use std::collections::BTreeSet;

fn arch(dim: usize, classes: usize) -> ArchSpec {
    ArchSpec::new(vec![
        LayerSpec::Dense {
            inputs: dim,
            outputs: 16,
        },
        LayerSpec::Relu,
        LayerSpec::Dense {
            inputs: 16,
            outputs: classes,
        },
    ])
}

fn fit(train: &Dataset, seed: u64) -> FpModel {
    let mut model = FpModel::new(arch(train.dim(), train.num_classes), seed).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.02,
        epochs: 20,
        batch_size: 32,
        seed,
    };
    for _ in 0..cfg.epochs {
        train_epoch(&mut model, train, &cfg).unwrap();
    }
    model
}

fn source_and_target_accuracy(shift: f64, seed: u64) -> (f64, f64) {
    let (source, target) = make_drift_pair(&DriftSpec::new(16, 4, 1000, 500, shift, seed)).unwrap();
    let (train, test) = source.split(0.3, seed).unwrap();
    let model = fit(&train, seed);
    let mut c = OpCounts::default();
    (
        accuracy(&model, &test.examples, &mut c).unwrap(),
        accuracy(&model, &target.examples, &mut c).unwrap(),
    )
}

#[test]
fn separable_blobs_are_learned() {
    // Unit-variance blobs centred at 4 * e_c.
    let mut rng = qcore::rng::stream(1, &[0]);
    let examples = (0..600)
        .map(|i| {
            let label = i % 3;
            let features = (0..8)
                .map(|d| {
                    let z: f64 = rng.sample(rand_distr::StandardNormal);
                    z + if d == label { 4.0 } else { 0.0 }
                })
                .collect();
            Example {
                id: i as u64,
                features,
                label,
            }
        })
        .collect();
    let source = Dataset::new(examples, 3, "blobs").unwrap();
    let (train, test) = source.split(0.25, 2).unwrap();
    let model = fit(&train, 3);
    let acc = accuracy(&model, &test.examples, &mut OpCounts::default()).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}

#[test]
fn zero_shift_keeps_accuracy() {
    for seed in 0..5 {
        let (src, tgt) = source_and_target_accuracy(0.0, seed);
        assert!((src - tgt).abs() < 0.05, "seed {seed}: {src} vs {tgt}");
    }
}

#[test]
fn large_shift_costs_accuracy() {
    for seed in 0..5 {
        let (src, tgt) = source_and_target_accuracy(3.0, seed);
        assert!(src - tgt >= 0.10, "seed {seed}: {src} vs {tgt}");
    }
}

#[test]
fn generation_is_deterministic() {
    let spec = DriftSpec::new(5, 3, 50, 40, 2.0, 9);
    assert_eq!(make_drift_pair(&spec).unwrap(), make_drift_pair(&spec).unwrap());
    let other = DriftSpec {
        seed: 10,
        ..spec.clone()
    };
    assert_ne!(make_drift_pair(&spec).unwrap(), make_drift_pair(&other).unwrap());
}

#[test]
fn stream_partitions_the_target() {
    let (_, target) = make_drift_pair(&DriftSpec::new(4, 2, 10, 237, 1.0, 4)).unwrap();
    for n in [1, 3, 10, 50] {
        let batches = split_stream(&target, n, 0.5, 6).unwrap();
        assert_eq!(batches.len(), n);
        let mut seen = BTreeSet::new();
        for b in &batches {
            assert!(!b.test.is_empty() && !b.examples.is_empty());
            for e in b.examples.iter().chain(&b.test) {
                assert!(seen.insert(e.id), "id {} appears twice", e.id);
            }
        }
        assert_eq!(seen, target.ids().into_iter().collect());
        assert_eq!(batches, split_stream(&target, n, 0.5, 6).unwrap());
    }
    assert!(matches!(
        split_stream(&target, 200, 0.5, 6),
        Err(qcore::Error::Usage(_))
    ));
}
