//! End-to-end continual calibration experiment.
//!
//! One lane per seed: generate or receive a source/target pair, train the
//! full-precision model while counting quantization misses, sample the
//! coreset, then for every quantization level record a calibration run,
//! train a bit-flipping network and walk the target stream. Each stream batch
//! refreshes the coreset, calibrates the model on coreset plus batch and
//! scores the batch's held-out slice.
//!
//! Lanes share nothing, so callers with threads can run them concurrently and
//! merge the results with [`ExperimentReport::from_lanes`].

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;
use serde::{Deserialize, Serialize};

use crate::bitflip::{
    bf_calibrate_traced, calibration_set, record_calibration, train_bitflip, BitFlipCalibrator, BitFlipNet,
    CalibrationConfig, DeltaRecord, SteCalibrator,
};
use crate::coreset::{info_loss_counts, sample_qcore, sample_uniform, update_qcore_with, InfoLossReport, QCoreSet};
use crate::data::{make_drift_pair, split_stream, Dataset, DriftSpec, Example, StreamBatch};
use crate::error::{usage, Result};
use crate::misses::{MissTable, PmfLevel};
use crate::nn::{accuracy, train_epoch_on, ArchSpec, FpModel, LayerSpec, OpCounts, TrainConfig};
use crate::quant::{quantize_model, Level, QuantLevels, QuantModel};
use crate::rng;

/// Which parts of the stream loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Full,
    /// Keep the initial coreset for the whole stream.
    NoUpdate,
    /// Never change the deployed model.
    NoBf,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Full, Mode::NoUpdate, Mode::NoBf];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::NoUpdate => "no-update",
            Mode::NoBf => "no-bf",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| usage!("unknown mode {s:?}; expected full, no-update or no-bf"))
    }
}

/// How the deployed model is calibrated on each stream batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Calibrator {
    /// Bit-flipping network only.
    #[default]
    BitFlip,
    /// Straight-through back-propagation, the reference the network replaces.
    Backprop,
}

/// Full experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub arch: ArchSpec,
    pub levels: QuantLevels,
    pub core_budget: usize,
    pub n_batches: usize,
    pub seeds: Vec<u64>,
    /// Full-precision training.
    pub train: TrainConfig,
    /// Back-propagation calibration used while recording deltas and by the
    /// back-propagation baselines.
    pub record: TrainConfig,
    /// Bit-flipping network training.
    pub bitflip_train: TrainConfig,
    pub calibration: CalibrationConfig,
    pub drift: DriftSpec,
    /// Share of the source held out for source-domain evaluation.
    pub source_test_fraction: f64,
    /// Share of every stream chunk held out for scoring that batch.
    pub stream_test_fraction: f64,
    #[serde(default)]
    pub calibrator: Calibrator,
    /// Replace every bit-flipping network with one that always answers 0.
    #[serde(default)]
    pub zero_bitflip: bool,
    /// Score the test slice after every calibration epoch.
    #[serde(default)]
    pub trace_epochs: bool,
    /// Independent subset draws averaged per seed in the subset comparison.
    #[serde(default = "one")]
    pub subset_draws: usize,
}

fn one() -> usize {
    1
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            arch: ArchSpec::new(vec![
                LayerSpec::Conv1d {
                    in_channels: 1,
                    out_channels: 4,
                    kernel: 3,
                    length: 16,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 56,
                    outputs: 16,
                },
                LayerSpec::Relu,
                LayerSpec::Dense { inputs: 16, outputs: 4 },
            ]),
            levels: QuantLevels::new(vec![Level::Bits(2), Level::Bits(4), Level::Bits(8)]).expect("distinct levels"),
            core_budget: 30,
            n_batches: 10,
            seeds: (0..5).collect(),
            train: TrainConfig {
                learning_rate: 0.05,
                epochs: 30,
                batch_size: 64,
                seed: 0,
            },
            record: TrainConfig {
                learning_rate: 0.03,
                epochs: 10,
                batch_size: 10,
                seed: 0,
            },
            bitflip_train: TrainConfig {
                learning_rate: 0.05,
                epochs: 20,
                batch_size: 64,
                seed: 0,
            },
            calibration: CalibrationConfig::default(),
            drift: DriftSpec::new(16, 4, 2000, 1000, 3.0, 0),
            source_test_fraction: 0.2,
            stream_test_fraction: 0.5,
            calibrator: Calibrator::BitFlip,
            zero_bitflip: false,
            trace_epochs: false,
            subset_draws: 5,
        }
    }
}

impl ExperimentConfig {
    /// Check the configuration; returns warnings for legal but dubious values.
    pub fn validate(&self) -> Result<Vec<String>> {
        let (width, classes) = self.arch.validate()?;
        self.train.validate()?;
        self.record.validate()?;
        self.bitflip_train.validate()?;
        self.calibration.validate()?;
        if self.levels.as_slice().contains(&Level::Full) {
            return Err(usage!("stream levels must be bit widths; 32 is only a tracking level"));
        }
        if self.core_budget == 0 {
            return Err(usage!("core budget must be positive"));
        }
        if self.n_batches == 0 {
            return Err(usage!("need at least one stream batch"));
        }
        if self.subset_draws == 0 {
            return Err(usage!("need at least one subset draw"));
        }
        if self.seeds.is_empty() {
            return Err(usage!("need at least one seed"));
        }
        for (name, f) in [
            ("source_test_fraction", self.source_test_fraction),
            ("stream_test_fraction", self.stream_test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return Err(usage!("{name} must lie in (0, 1)"));
            }
        }
        if self.drift.dim != width {
            return Err(usage!(
                "drift dim {} does not match the model input width {width}",
                self.drift.dim
            ));
        }
        if self.drift.classes > classes {
            return Err(usage!(
                "drift has {} classes, model emits {classes}",
                self.drift.classes
            ));
        }
        let mut warnings = Vec::new();
        if self.core_budget < self.drift.classes {
            warnings.push(format!(
                "core budget {} is below the class count {}",
                self.core_budget, self.drift.classes
            ));
        }
        Ok(warnings)
    }
}

/// Pipeline phases with their own counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Train,
    MissTracking,
    CoreSampling,
    Recording,
    BitFlipTraining,
    CoreUpdate,
    BitFlipCalibration,
    Evaluation,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::Train,
        Phase::MissTracking,
        Phase::CoreSampling,
        Phase::Recording,
        Phase::BitFlipTraining,
        Phase::CoreUpdate,
        Phase::BitFlipCalibration,
        Phase::Evaluation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::MissTracking => "miss-tracking",
            Phase::CoreSampling => "core-sampling",
            Phase::Recording => "recording",
            Phase::BitFlipTraining => "bitflip-training",
            Phase::CoreUpdate => "core-update",
            Phase::BitFlipCalibration => "calibration",
            Phase::Evaluation => "evaluation",
        }
    }
}

/// Monotonic time source in microseconds.
pub trait Clock: Sync {
    fn now_micros(&self) -> u64;
}

/// A clock that never moves, for callers without one.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_micros(&self) -> u64 {
        0
    }
}

/// Operation counters and elapsed time per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhaseLedger {
    pub ops: [OpCounts; 8],
    pub micros: [u64; 8],
}

impl PhaseLedger {
    pub fn ops(&self, phase: Phase) -> OpCounts {
        self.ops[phase as usize]
    }

    pub fn micros(&self, phase: Phase) -> u64 {
        self.micros[phase as usize]
    }

    pub fn total(&self) -> OpCounts {
        self.ops.iter().fold(OpCounts::default(), |a, &b| a + b)
    }

    pub fn merge(&mut self, other: &PhaseLedger) {
        for i in 0..8 {
            self.ops[i] += other.ops[i];
            self.micros[i] += other.micros[i];
        }
    }
}

struct Meter<'a> {
    ledger: PhaseLedger,
    clock: &'a dyn Clock,
}

impl Meter<'_> {
    fn run<T>(&mut self, phase: Phase, f: impl FnOnce(&mut OpCounts) -> Result<T>) -> Result<T> {
        let start = self.clock.now_micros();
        let mut counts = OpCounts::default();
        let out = f(&mut counts).map_err(|e| e.in_phase(phase.name()));
        self.ledger.ops[phase as usize] += counts;
        self.ledger.micros[phase as usize] += self.clock.now_micros().saturating_sub(start);
        out
    }
}

/// Per-level outcome of one lane.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelRun {
    pub bits: u8,
    /// Accuracy of the deployed model on the whole target test portion
    /// before the stream starts.
    pub static_accuracy: f64,
    /// Training accuracy of the bit-flipping network.
    pub bitflip_accuracy: f64,
    /// Records labelled -1, 0 and 1.
    pub flip_classes: [u64; 3],
    /// Accuracy on each batch's test slice after calibration.
    pub batch_accuracy: Vec<f64>,
    /// Test-slice accuracy after each calibration epoch, per batch, when
    /// epoch tracing is on.
    pub epoch_accuracy: Vec<Vec<f64>>,
    /// Largest per-epoch code change seen in calibration.
    pub max_code_step: u32,
    /// Every step predicted by the bit-flipping network lay in {-1, 0, 1}.
    pub steps_in_domain: bool,
    /// Coreset ids after the last batch.
    pub final_core: Vec<u64>,
    /// Final coreset members that came from the target stream.
    pub target_members: usize,
}

/// Everything one seed produced.
#[derive(Debug, Clone, PartialEq)]
pub struct LaneReport {
    pub seed: u64,
    pub fp_source_accuracy: f64,
    pub fp_target_accuracy: f64,
    pub info_loss: InfoLossReport,
    pub initial_core: Vec<u64>,
    pub levels: Vec<LevelRun>,
    pub ledger: PhaseLedger,
    pub warnings: Vec<String>,
}

/// Results of a run over every configured seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub mode: Mode,
    pub calibrator: Calibrator,
    pub levels: Vec<u8>,
    pub n_batches: usize,
    pub lanes: Vec<LaneReport>,
}

impl ExperimentReport {
    /// Assemble lanes (in any order) into a report sorted by seed.
    pub fn from_lanes(cfg: &ExperimentConfig, mode: Mode, mut lanes: Vec<LaneReport>) -> Self {
        lanes.sort_by_key(|l| l.seed);
        ExperimentReport {
            mode,
            calibrator: cfg.calibrator,
            levels: level_bits(&cfg.levels),
            n_batches: cfg.n_batches,
            lanes,
        }
    }

    /// Accuracy of `(seed index, batch, level index)`.
    pub fn accuracy(&self, lane: usize, batch: usize, level: usize) -> f64 {
        self.lanes[lane].levels[level].batch_accuracy[batch]
    }

    /// Mean over batches for one lane and level.
    pub fn lane_level_mean(&self, lane: usize, level: usize) -> f64 {
        mean(&self.lanes[lane].levels[level].batch_accuracy)
    }

    /// Mean over batches and levels for one lane.
    pub fn lane_mean(&self, lane: usize) -> f64 {
        let n = self.levels.len();
        (0..n).map(|l| self.lane_level_mean(lane, l)).sum::<f64>() / n as f64
    }

    /// Mean over seeds and batches, per level.
    pub fn level_means(&self) -> Vec<f64> {
        (0..self.levels.len())
            .map(|l| (0..self.lanes.len()).map(|s| self.lane_level_mean(s, l)).sum::<f64>() / self.lanes.len() as f64)
            .collect()
    }

    /// Counters summed over lanes.
    pub fn ledger(&self) -> PhaseLedger {
        let mut total = PhaseLedger::default();
        for lane in &self.lanes {
            total.merge(&lane.ledger);
        }
        total
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn level_bits(levels: &QuantLevels) -> Vec<u8> {
    levels
        .as_slice()
        .iter()
        .map(|l| match l {
            Level::Bits(b) => *b,
            Level::Full => 32,
        })
        .collect()
}

/// Per-lane counters and timings summed over lanes.
pub fn count_ops(report: &ExperimentReport) -> PhaseLedger {
    report.ledger()
}

/// Synthetic source/target pair of one lane; the lane seed is mixed into
/// the configured data seed.
pub fn synthetic_data(cfg: &ExperimentConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let spec = DriftSpec {
        seed: rng::derive(cfg.drift.seed, &[rng::LANE, seed]),
        ..cfg.drift.clone()
    };
    make_drift_pair(&spec)
}

/// The stream batches a lane walks through.
pub fn lane_stream(cfg: &ExperimentConfig, seed: u64, target: &Dataset) -> Result<Vec<StreamBatch>> {
    split_stream(
        target,
        cfg.n_batches,
        cfg.stream_test_fraction,
        rng::derive(seed, &[rng::SPLIT, 1]),
    )
}

/// The full-precision model of a lane with the miss counters gathered while
/// training it.
#[derive(Debug, Clone)]
pub struct TrainedSource {
    pub model: FpModel,
    pub source_train: Dataset,
    pub source_test: Dataset,
    /// Misses at the configured levels.
    pub table: MissTable,
    /// Misses of the full-precision model itself.
    pub table_fp: MissTable,
    /// Mean loss of the last training epoch.
    pub final_loss: f64,
}

/// The lane's `(train, test)` split of the source domain.
pub fn source_split(cfg: &ExperimentConfig, seed: u64, source: &Dataset) -> Result<(Dataset, Dataset)> {
    source.split(cfg.source_test_fraction, rng::derive(seed, &[rng::SPLIT]))
}

fn train_tracked(cfg: &ExperimentConfig, seed: u64, source: &Dataset, meter: &mut Meter) -> Result<TrainedSource> {
    let (source_train, source_test) = source_split(cfg, seed, source)?;
    let mut model = FpModel::new(cfg.arch.clone(), rng::derive(seed, &[rng::INIT]))?;
    let train = TrainConfig {
        seed: rng::derive(seed, &[rng::SHUFFLE]),
        ..cfg.train.clone()
    };
    let mut table = MissTable::new(source_train.ids(), cfg.levels.clone())?;
    let mut table_fp = MissTable::new(source_train.ids(), QuantLevels::new(vec![Level::Full])?)?;
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.train.epochs {
        final_loss = meter.run(Phase::Train, |c| {
            train_epoch_on(&mut model, &source_train.examples, &train, None, c)
        })?;
        meter.run(Phase::MissTracking, |c| {
            table.observe_epoch_counted(&model, &source_train.examples, c)?;
            table_fp.observe_epoch_counted(&model, &source_train.examples, c)
        })?;
    }
    Ok(TrainedSource {
        model,
        source_train,
        source_test,
        table,
        table_fp,
        final_loss,
    })
}

fn check_domains(cfg: &ExperimentConfig, domains: &[&Dataset]) -> Result<()> {
    for d in domains {
        d.validate()?;
        if d.dim() != cfg.arch.input_width() {
            return Err(usage!(
                "dataset {:?} has {} features, model expects {}",
                d.domain_tag,
                d.dim(),
                cfg.arch.input_width()
            ));
        }
    }
    Ok(())
}

/// Train the lane's full-precision model on `source` while counting misses.
pub fn train_source(
    cfg: &ExperimentConfig,
    seed: u64,
    source: &Dataset,
    clock: &dyn Clock,
) -> Result<(TrainedSource, PhaseLedger)> {
    cfg.validate()?;
    check_domains(cfg, &[source])?;
    let mut meter = Meter {
        ledger: PhaseLedger::default(),
        clock,
    };
    let trained = train_tracked(cfg, seed, source, &mut meter)?;
    Ok((trained, meter.ledger))
}

/// Sample the lane's initial coreset from the summed miss distribution.
pub fn initial_core(cfg: &ExperimentConfig, seed: u64, trained: &TrainedSource) -> Result<(QCoreSet, InfoLossReport)> {
    sample_initial_core(cfg.core_budget, seed, &trained.source_train.examples, &trained.table)
}

/// [`initial_core`] from an explicit pool and miss table.
pub fn sample_initial_core(
    budget: usize,
    seed: u64,
    pool: &[Example],
    table: &MissTable,
) -> Result<(QCoreSet, InfoLossReport)> {
    let pmf = table.pmf(PmfLevel::Summed)?;
    let core = sample_qcore(pool, table, &pmf, budget, rng::derive(seed, &[rng::SAMPLE]))?;
    let loss = info_loss_counts(&pmf, &core.selected_counts())?;
    Ok((core, loss))
}

/// A quantized model ready to go on the stream, with its bit-flipping
/// network.
#[derive(Debug, Clone)]
pub struct Deployment {
    pub bits: u8,
    /// The quantized model after the recorded calibration run.
    pub model: QuantModel,
    pub net: BitFlipNet,
    pub records: Vec<DeltaRecord>,
    pub bitflip_accuracy: f64,
    pub flip_classes: [u64; 3],
    pub warnings: Vec<String>,
}

fn level_seed(seed: u64, bits: u8) -> u64 {
    rng::derive(seed, &[rng::BITFLIP, bits as u64])
}

/// Quantize `model` at `bits`, record a calibration run on the coreset and
/// fit the bit-flipping network on the records.
pub fn deploy_level(
    cfg: &ExperimentConfig,
    seed: u64,
    bits: u8,
    model: &FpModel,
    core: &[Example],
    clock: &dyn Clock,
) -> Result<(Deployment, PhaseLedger)> {
    let mut meter = Meter {
        ledger: PhaseLedger::default(),
        clock,
    };
    let level_seed = level_seed(seed, bits);
    let record_cfg = TrainConfig {
        seed: level_seed,
        ..cfg.record.clone()
    };
    let qm = quantize_model(model, bits)?;
    let (qm, records) = meter.run(Phase::Recording, |c| {
        record_calibration(&qm, core, &record_cfg, cfg.calibration.flip_threshold, c)
    })?;
    let (net, bitflip_accuracy, flip_classes, warnings) = meter.run(Phase::BitFlipTraining, |c| {
        if cfg.zero_bitflip {
            return Ok((
                BitFlipNet::constant(0, bits, bits)?,
                1.0,
                [0, records.len() as u64, 0],
                Vec::new(),
            ));
        }
        let t = train_bitflip(
            &records,
            bits,
            bits,
            &TrainConfig {
                seed: level_seed,
                ..cfg.bitflip_train.clone()
            },
            c,
        )?;
        Ok((t.net, t.train_accuracy, t.class_counts, t.warnings))
    })?;
    let deployment = Deployment {
        bits,
        model: qm,
        net,
        records,
        bitflip_accuracy,
        flip_classes,
        warnings: warnings.into_iter().map(|w| format!("{bits}-bit: {w}")).collect(),
    };
    Ok((deployment, meter.ledger))
}

/// Walk `stream` with one deployment: refresh the coreset, calibrate and
/// score every batch. `source_ids` tells source examples from stream ones.
#[allow(clippy::too_many_arguments)]
pub fn stream_level(
    cfg: &ExperimentConfig,
    mode: Mode,
    seed: u64,
    deployment: &Deployment,
    core: &QCoreSet,
    stream: &[StreamBatch],
    source_ids: &BTreeSet<u64>,
    clock: &dyn Clock,
) -> Result<(LevelRun, Vec<String>, PhaseLedger)> {
    let mut meter = Meter {
        ledger: PhaseLedger::default(),
        clock,
    };
    let bits = deployment.bits;
    let bf = &deployment.net;
    let mut qm = deployment.model.clone();
    let level_seed = level_seed(seed, bits);
    let record_cfg = TrainConfig {
        seed: level_seed,
        ..cfg.record.clone()
    };
    let target_test: Vec<Example> = stream.iter().flat_map(|b| b.test.iter().cloned()).collect();
    let static_accuracy = meter.run(Phase::Evaluation, |c| qm.accuracy(&target_test, c))?;
    let mut warnings = Vec::new();
    let mut run = LevelRun {
        bits,
        static_accuracy,
        bitflip_accuracy: deployment.bitflip_accuracy,
        flip_classes: deployment.flip_classes,
        batch_accuracy: Vec::with_capacity(stream.len()),
        epoch_accuracy: Vec::new(),
        max_code_step: 0,
        steps_in_domain: true,
        final_core: Vec::new(),
        target_members: 0,
    };
    let mut lane_core = core.clone();
    let mut ste = SteCalibrator::new(record_cfg.clone());
    for batch in stream {
        if mode != Mode::NoUpdate {
            let update_seed = rng::derive(level_seed, &[rng::SAMPLE, batch.index as u64]);
            lane_core = meter.run(Phase::CoreUpdate, |c| {
                let mut bf_step = BitFlipCalibrator { net: bf };
                let mut bp_step = SteCalibrator::new(record_cfg.clone());
                let step: &mut dyn crate::coreset::CalibrationStep = match cfg.calibrator {
                    Calibrator::BitFlip => &mut bf_step,
                    Calibrator::Backprop => &mut bp_step,
                };
                update_qcore_with(
                    &lane_core,
                    &batch.examples,
                    &qm,
                    cfg.calibration.epochs,
                    update_seed,
                    step,
                    c,
                )
            })?;
            warnings.extend(
                lane_core
                    .warnings
                    .iter()
                    .map(|w| format!("{bits}-bit batch {}: {w}", batch.index)),
            );
        }
        let mut trace = Vec::new();
        if mode != Mode::NoBf {
            let data = calibration_set(&lane_core.members, &batch.examples);
            let mut eval_ops = OpCounts::default();
            let before = qm.clone();
            qm = meter.run(Phase::BitFlipCalibration, |c| {
                let mut prev = qm.clone();
                let mut on_epoch = |_: u32, m: &QuantModel| -> Result<()> {
                    run.max_code_step = run.max_code_step.max(max_step(&prev, m));
                    prev = m.clone();
                    if cfg.trace_epochs {
                        trace.push(m.accuracy(&batch.test, &mut eval_ops)?);
                    }
                    Ok(())
                };
                match cfg.calibrator {
                    Calibrator::BitFlip => bf_calibrate_traced(&qm, bf, &data, &cfg.calibration, c, &mut on_epoch),
                    Calibrator::Backprop => {
                        let mut m = qm.clone();
                        for e in 0..cfg.calibration.epochs {
                            ste.epoch(&mut m, &data, c)?;
                            on_epoch(e + 1, &m)?;
                        }
                        Ok(m)
                    }
                }
            })?;
            meter.ledger.ops[Phase::Evaluation as usize] += eval_ops;
            if cfg.calibrator == Calibrator::BitFlip {
                run.steps_in_domain &= max_step(&before, &qm) <= cfg.calibration.epochs;
            }
        }
        run.epoch_accuracy.push(trace);
        let acc = meter.run(Phase::Evaluation, |c| qm.accuracy(&batch.test, c))?;
        run.batch_accuracy.push(acc);
    }
    run.final_core = lane_core.ids();
    run.target_members = run.final_core.iter().filter(|id| !source_ids.contains(id)).count();
    Ok((run, warnings, meter.ledger))
}

/// Run one seed on the synthetic pair the configuration describes.
pub fn run_lane(cfg: &ExperimentConfig, mode: Mode, seed: u64, clock: &dyn Clock) -> Result<LaneReport> {
    let (source, target) = synthetic_data(cfg, seed).map_err(|e| e.in_phase("data"))?;
    run_lane_on(cfg, mode, seed, &source, &target, clock)
}

/// Run one seed on the given source and target domains.
pub fn run_lane_on(
    cfg: &ExperimentConfig,
    mode: Mode,
    seed: u64,
    source: &Dataset,
    target: &Dataset,
    clock: &dyn Clock,
) -> Result<LaneReport> {
    let mut warnings = cfg.validate()?;
    check_domains(cfg, &[source, target])?;
    let mut meter = Meter {
        ledger: PhaseLedger::default(),
        clock,
    };
    let trained = train_tracked(cfg, seed, source, &mut meter)?;
    let (core, loss) = meter.run(Phase::CoreSampling, |_| initial_core(cfg, seed, &trained))?;
    warnings.extend(core.warnings.iter().cloned());

    let stream = lane_stream(cfg, seed, target).map_err(|e| e.in_phase("stream split"))?;
    let target_test: Vec<Example> = stream.iter().flat_map(|b| b.test.iter().cloned()).collect();
    let (fp_source_accuracy, fp_target_accuracy) = meter.run(Phase::Evaluation, |c| {
        Ok((
            accuracy(&trained.model, &trained.source_test.examples, c)?,
            accuracy(&trained.model, &target_test, c)?,
        ))
    })?;

    let source_ids: BTreeSet<u64> = source.ids().into_iter().collect();
    let mut levels = Vec::new();
    for &bits in &level_bits(&cfg.levels) {
        let (deployment, ledger) = deploy_level(cfg, seed, bits, &trained.model, &core.members, clock)?;
        meter.ledger.merge(&ledger);
        warnings.extend(deployment.warnings.iter().cloned());
        let (run, w, ledger) = stream_level(cfg, mode, seed, &deployment, &core, &stream, &source_ids, clock)?;
        meter.ledger.merge(&ledger);
        warnings.extend(w);
        levels.push(run);
    }
    Ok(LaneReport {
        seed,
        fp_source_accuracy,
        fp_target_accuracy,
        info_loss: loss,
        initial_core: core.ids(),
        levels,
        ledger: meter.ledger,
        warnings,
    })
}

fn max_step(a: &QuantModel, b: &QuantModel) -> u32 {
    a.tensors
        .iter()
        .zip(&b.tensors)
        .flat_map(|(x, y)| x.codes.iter().zip(&y.codes))
        .map(|(&p, &q)| (p as i32 - q as i32).unsigned_abs())
        .max()
        .unwrap_or(0)
}

/// Run every configured seed in order.
pub fn run_pipeline(cfg: &ExperimentConfig, clock: &dyn Clock) -> Result<ExperimentReport> {
    run_ablation(cfg, Mode::Full, clock)
}

/// Run every configured seed in order under `mode`.
pub fn run_ablation(cfg: &ExperimentConfig, mode: Mode, clock: &dyn Clock) -> Result<ExperimentReport> {
    let lanes = cfg
        .seeds
        .iter()
        .map(|&s| run_lane(cfg, mode, s, clock))
        .collect::<Result<Vec<_>>>()?;
    Ok(ExperimentReport::from_lanes(cfg, mode, lanes))
}

/// Coreset construction strategies compared on the source domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    /// Summed multi-level miss distribution.
    QCore,
    /// Uniform sample.
    Random,
    /// Single-level miss distribution at this bit width.
    CoreJ(u8),
    /// Miss distribution of the full-precision model itself.
    Core32,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::QCore => f.write_str("qcore"),
            Strategy::Random => f.write_str("random"),
            Strategy::CoreJ(b) => write!(f, "core-{b}"),
            Strategy::Core32 => f.write_str("core-32"),
        }
    }
}

/// One cell of the subset comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetRow {
    pub seed: u64,
    pub strategy: Strategy,
    pub bits: u8,
    /// Source test accuracy after calibrating on the subset.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetComparison {
    pub levels: Vec<u8>,
    pub strategies: Vec<Strategy>,
    pub rows: Vec<SubsetRow>,
}

impl SubsetComparison {
    pub fn accuracy(&self, seed: u64, strategy: Strategy, bits: u8) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.seed == seed && r.strategy == strategy && r.bits == bits)
            .map(|r| r.accuracy)
    }

    /// Mean over levels of one strategy in one seed.
    pub fn cross_level(&self, seed: u64, strategy: Strategy) -> f64 {
        let xs: Vec<f64> = self
            .levels
            .iter()
            .filter_map(|&b| self.accuracy(seed, strategy, b))
            .collect();
        mean(&xs)
    }
}

/// The strategies compared for a set of levels, in report order.
pub fn strategies(levels: &QuantLevels) -> Vec<Strategy> {
    let mut out = vec![Strategy::QCore, Strategy::Random];
    out.extend(level_bits(levels).into_iter().map(Strategy::CoreJ));
    out.push(Strategy::Core32);
    out
}

/// Compare coreset strategies for one seed: build every subset from the
/// same trained model, calibrate each level on it with back-propagation and
/// score on the source test split.
pub fn subset_lane(cfg: &ExperimentConfig, seed: u64, source: &Dataset) -> Result<Vec<SubsetRow>> {
    cfg.validate()?;
    let mut meter = Meter {
        ledger: PhaseLedger::default(),
        clock: &NoClock,
    };
    let trained = train_tracked(cfg, seed, source, &mut meter)?;
    let pool = &trained.source_train.examples;
    let mut rows = Vec::new();
    for strategy in strategies(&cfg.levels) {
        let mut sums = vec![0.0; cfg.levels.len()];
        for draw in 0..cfg.subset_draws {
            let sample_seed = rng::derive(seed, &[rng::SAMPLE, draw as u64]);
            let subset: QCoreSet = match strategy {
                Strategy::QCore => {
                    let pmf = trained.table.pmf(PmfLevel::Summed)?;
                    sample_qcore(pool, &trained.table, &pmf, cfg.core_budget, sample_seed)?
                }
                Strategy::Random => sample_uniform(pool, cfg.core_budget, sample_seed)?,
                Strategy::CoreJ(b) => {
                    let pmf = trained.table.pmf(PmfLevel::Level(Level::Bits(b)))?;
                    sample_qcore(pool, &trained.table, &pmf, cfg.core_budget, sample_seed)?
                }
                Strategy::Core32 => {
                    let pmf = trained.table_fp.pmf(PmfLevel::Level(Level::Full))?;
                    sample_qcore(pool, &trained.table_fp, &pmf, cfg.core_budget, sample_seed)?
                }
            };
            for (sum, bits) in sums.iter_mut().zip(level_bits(&cfg.levels)) {
                let record_cfg = TrainConfig {
                    seed: rng::derive(seed, &[rng::BITFLIP, bits as u64, draw as u64]),
                    ..cfg.record.clone()
                };
                let mut qm = quantize_model(&trained.model, bits)?;
                let mut ste = SteCalibrator::new(record_cfg.clone());
                for _ in 0..record_cfg.epochs {
                    ste.epoch(&mut qm, &subset.members, &mut OpCounts::default())?;
                }
                *sum += qm.accuracy(&trained.source_test.examples, &mut OpCounts::default())?;
            }
        }
        for (sum, bits) in sums.into_iter().zip(level_bits(&cfg.levels)) {
            rows.push(SubsetRow {
                seed,
                strategy,
                bits,
                accuracy: sum / cfg.subset_draws as f64,
            });
        }
    }
    Ok(rows)
}

/// [`subset_lane`] over every configured seed on synthetic data.
pub fn run_subset_comparison(cfg: &ExperimentConfig) -> Result<SubsetComparison> {
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let (source, _) = synthetic_data(cfg, seed)?;
        rows.extend(subset_lane(cfg, seed, &source)?);
    }
    Ok(SubsetComparison {
        levels: level_bits(&cfg.levels),
        strategies: strategies(&cfg.levels),
        rows,
    })
}

/// Operation counts of one bit-flip epoch and one back-propagation epoch of
/// the same model on the same data.
pub fn epoch_costs(
    qm: &QuantModel,
    bf: &BitFlipNet,
    data: &[Example],
    record: &TrainConfig,
) -> Result<(OpCounts, OpCounts)> {
    let mut bf_ops = OpCounts::default();
    let one = CalibrationConfig {
        epochs: 1,
        ..CalibrationConfig::default()
    };
    crate::bitflip::bf_calibrate(qm, bf, data, &one, &mut bf_ops)?;
    let mut bp_ops = OpCounts::default();
    SteCalibrator::new(record.clone()).epoch(&mut qm.clone(), data, &mut bp_ops)?;
    Ok((bf_ops, bp_ops))
}
