//! Subcommand bodies. Each reads its inputs, writes its artifacts under the
//! output directory and returns the text it prints.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qcore::bitflip::BitFlipNet;
use qcore::coreset::{info_loss, info_loss_counts, InfoLossReport};
use qcore::data::Example;
use qcore::harness::{
    deploy_level, lane_stream, run_lane_on, sample_initial_core, source_split, strategies, stream_level, subset_lane,
    train_source, Deployment, ExperimentReport, LaneReport, Mode, Phase, PhaseLedger, Strategy,
};
use qcore::misses::{MissPmf, PmfLevel};
use qcore::nn::{accuracy, OpCounts};
use qcore::quant::{quantize_model, QuantLevels, QuantModel};

use crate::checkpoint::{decode_bitflip, decode_fp, decode_quant, encode_bitflip, encode_fp, encode_quant, QuantKind};
use crate::config::CliConfig;
use crate::error::{CliError, Result};
use crate::io::{read, write_atomic};
use crate::report::{accuracy_table, write_report};
use crate::runner::{map_lanes, WallClock};
use crate::tables::{deltas_csv, load_misses, misses_csv, pmf_csv, CoreFile};

pub const MODEL_FILE: &str = "model.qcfp";
pub const MISSES_FILE: &str = "misses.csv";
pub const PMF_FILE: &str = "pmf.csv";
pub const CORE_FILE: &str = "qcore.toml";
pub const INFO_LOSS_FILE: &str = "infoloss.toml";

fn quant_file(bits: u8) -> String {
    format!("model-{bits}bit.qcqm")
}
fn calibrated_file(bits: u8) -> String {
    format!("calibrated-{bits}bit.qcqm")
}
fn bitflip_file(bits: u8) -> String {
    format!("bitflip-{bits}bit.qcqm")
}
fn deltas_file(bits: u8) -> String {
    format!("deltas-{bits}bit.csv")
}

/// Short decimal rendering: six places, trailing zeros dropped.
pub fn num(x: f64) -> String {
    let s = format!("{x:.6}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn bits_of(levels: &QuantLevels) -> Vec<u8> {
    levels.as_slice().iter().map(|&l| u8::from(l)).collect()
}

fn pmf_line(pmf: &MissPmf) -> String {
    let bins: Vec<String> = pmf.bins.iter().map(|(k, n)| format!("{k}:{n}")).collect();
    let level = match pmf.level {
        PmfLevel::Level(l) => format!("{l}-bit"),
        PmfLevel::Summed => "summed".into(),
    };
    format!("pmf {level}: {}", bins.join(" "))
}

fn load_fp(path: &Path) -> Result<qcore::nn::FpModel> {
    decode_fp(&read(path)?).map_err(|e| CliError::parse(path, e))
}

fn load_quant(path: &Path) -> Result<QuantModel> {
    match decode_quant(&read(path)?).map_err(|e| CliError::parse(path, e))? {
        (qm, QuantKind::Model) => Ok(qm),
        (_, QuantKind::BitFlip { .. }) => Err(CliError::parse(path, "holds a bit-flipping network, not a model")),
    }
}

fn load_bitflip(path: &Path) -> Result<BitFlipNet> {
    decode_bitflip(&read(path)?).map_err(|e| CliError::parse(path, e))
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        log::warn!("{w}");
    }
}

/// Train the full-precision model of the first seed while counting misses.
pub fn train(cfg: &CliConfig) -> Result<String> {
    let seed = cfg.first_seed()?;
    let (source, _) = cfg.domains(seed)?;
    let (trained, _) = train_source(&cfg.experiment, seed, &source, &WallClock::new())?;
    write_atomic(&cfg.out(MODEL_FILE), &encode_fp(&trained.model))?;
    write_atomic(&cfg.out(MISSES_FILE), &misses_csv(&trained.table))?;
    write_atomic(&cfg.out(PMF_FILE), &pmf_csv(&trained.table)?)?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "seed {seed}: trained on {} source examples",
        trained.source_train.len()
    );
    let _ = writeln!(out, "final train loss {}", num(trained.final_loss));
    for &l in trained.table.levels().as_slice() {
        let _ = writeln!(out, "{}", pmf_line(&trained.table.pmf(PmfLevel::Level(l))?));
    }
    let _ = writeln!(out, "{}", pmf_line(&trained.table.pmf(PmfLevel::Summed)?));
    let _ = writeln!(out, "wrote {}", cfg.out(MODEL_FILE).display());
    Ok(out)
}

fn loss_lines(out: &mut String, r: &InfoLossReport) {
    let _ = writeln!(out, "full mean {}", num(r.full_mean));
    let _ = writeln!(out, "core mean {}", num(r.core_mean));
    let _ = writeln!(out, "epsilon {}", num(r.epsilon));
    let _ = writeln!(out, "K {}", r.bound);
}

fn loss_toml(r: &InfoLossReport) -> String {
    format!(
        "full_mean = {:?}\ncore_mean = {:?}\nepsilon = {:?}\nbound = {}\n",
        r.full_mean, r.core_mean, r.epsilon, r.bound
    )
}

/// Sample the coreset from a miss table. Only ids matter here, so the pool
/// is the table's ids with empty features.
pub fn qcore(cfg: &CliConfig, misses: Option<&Path>) -> Result<String> {
    let path = misses.map(Path::to_path_buf).unwrap_or_else(|| cfg.out(MISSES_FILE));
    let table = load_misses(&path)?;
    let pool: Vec<Example> = table
        .ids()
        .iter()
        .map(|&id| Example {
            id,
            features: Vec::new(),
            label: 0,
        })
        .collect();
    let seed = cfg.first_seed()?;
    let (core, loss) = sample_initial_core(cfg.experiment.core_budget, seed, &pool, &table)?;
    warn_all(&core.warnings);
    write_atomic(&cfg.out(CORE_FILE), CoreFile::from_core(&core).to_toml().as_bytes())?;
    write_atomic(&cfg.out(INFO_LOSS_FILE), loss_toml(&loss).as_bytes())?;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "pool {}  budget {}  lambda {}",
        pool.len(),
        core.size_budget,
        num(core.lambda)
    );
    for b in &core.bins {
        let _ = writeln!(
            out,
            "bin k={} N={} quota={} selected={}",
            b.misses, b.population, b.quota, b.selected
        );
    }
    loss_lines(&mut out, &loss);
    let _ = writeln!(out, "wrote {}", cfg.out(CORE_FILE).display());
    Ok(out)
}

/// Quantize the trained checkpoint at every level.
pub fn quantize(cfg: &CliConfig) -> Result<String> {
    let model = load_fp(&cfg.out(MODEL_FILE))?;
    let mut out = String::new();
    for bits in bits_of(&cfg.experiment.levels) {
        let qm = quantize_model(&model, bits)?;
        let mut worst: f64 = 0.0;
        let mut half_step: f64 = 0.0;
        for (t, fp) in qm.tensors.iter().zip(model.params()) {
            for (i, &w) in fp.iter().enumerate() {
                worst = worst.max((w as f64 - t.value(i)).abs());
            }
            half_step = half_step.max(t.scale / 2.0);
        }
        write_atomic(&cfg.out(&quant_file(bits)), &encode_quant(&qm, QuantKind::Model))?;
        let _ = writeln!(
            out,
            "{bits}-bit: {} codes, max error {} (half step {})",
            qm.param_count(),
            num(worst),
            num(half_step)
        );
    }
    Ok(out)
}

fn load_core(cfg: &CliConfig, pool: &[Example]) -> Result<qcore::coreset::QCoreSet> {
    let path = cfg.out(CORE_FILE);
    CoreFile::load(&path)?
        .to_core(pool)
        .map_err(|e| CliError::parse(&path, e))
}

/// Record a calibration run on the coreset and fit a bit-flipping network
/// per level.
pub fn bf_train(cfg: &CliConfig) -> Result<String> {
    let seed = cfg.first_seed()?;
    let model = load_fp(&cfg.out(MODEL_FILE))?;
    let (source, _) = cfg.domains(seed)?;
    let core = load_core(cfg, &source.examples)?;
    let mut out = String::new();
    for bits in bits_of(&cfg.experiment.levels) {
        let (d, _) = deploy_level(&cfg.experiment, seed, bits, &model, &core.members, &WallClock::new())?;
        warn_all(&d.warnings);
        write_atomic(
            &cfg.out(&calibrated_file(bits)),
            &encode_quant(&d.model, QuantKind::Model),
        )?;
        write_atomic(&cfg.out(&bitflip_file(bits)), &encode_bitflip(&d.net))?;
        write_atomic(&cfg.out(&deltas_file(bits)), &deltas_csv(&d.records))?;
        let [down, stay, up] = d.flip_classes;
        let _ = writeln!(
            out,
            "{bits}-bit: {} records (-1: {down}, 0: {stay}, +1: {up}), network train accuracy {}",
            d.records.len(),
            num(d.bitflip_accuracy)
        );
    }
    Ok(out)
}

fn staged_lane(cfg: &CliConfig, mode: Mode) -> Result<LaneReport> {
    let exp = &cfg.experiment;
    let seed = cfg.first_seed()?;
    let clock = WallClock::new();
    let model = load_fp(&cfg.out(MODEL_FILE))?;
    let table = load_misses(&cfg.out(MISSES_FILE))?;
    let (source, target) = cfg.domains(seed)?;
    let core = load_core(cfg, &source.examples)?;
    let info_loss = info_loss_counts(&table.pmf(PmfLevel::Summed)?, &core.selected_counts())?;
    let (_, source_test) = source_split(exp, seed, &source)?;
    let stream = lane_stream(exp, seed, &target)?;
    let target_test: Vec<Example> = stream.iter().flat_map(|b| b.test.iter().cloned()).collect();
    let mut ledger = PhaseLedger::default();
    let mut counts = OpCounts::default();
    let fp_source_accuracy = accuracy(&model, &source_test.examples, &mut counts)?;
    let fp_target_accuracy = accuracy(&model, &target_test, &mut counts)?;
    ledger.ops[Phase::Evaluation as usize] += counts;
    let source_ids: BTreeSet<u64> = source.ids().into_iter().collect();
    let mut warnings = exp.validate()?;
    let mut levels = Vec::new();
    for bits in bits_of(&exp.levels) {
        let deployment = Deployment {
            bits,
            model: load_quant(&cfg.out(&calibrated_file(bits)))?,
            net: load_bitflip(&cfg.out(&bitflip_file(bits)))?,
            records: Vec::new(),
            bitflip_accuracy: f64::NAN,
            flip_classes: [0; 3],
            warnings: Vec::new(),
        };
        if deployment.model.bit_width != bits || deployment.net.target_bits() != bits {
            return Err(CliError::Usage(format!(
                "{bits}-bit artifacts were built for another bit width"
            )));
        }
        let (run, w, l) = stream_level(exp, mode, seed, &deployment, &core, &stream, &source_ids, &clock)?;
        warnings.extend(w);
        ledger.merge(&l);
        levels.push(run);
    }
    Ok(LaneReport {
        seed,
        fp_source_accuracy,
        fp_target_accuracy,
        info_loss,
        initial_core: core.ids(),
        levels,
        ledger,
        warnings,
    })
}

/// Run the stream, either from staged artifacts (first seed) or end to end
/// for every seed.
pub fn stream(cfg: &CliConfig, mode: Mode, end_to_end: bool, workers: usize) -> Result<String> {
    let report = if end_to_end {
        run_lanes(cfg, mode, workers)?
    } else {
        ExperimentReport::from_lanes(&cfg.experiment, mode, vec![staged_lane(cfg, mode)?])
    };
    for lane in &report.lanes {
        warn_all(&lane.warnings);
    }
    write_report(&cfg.paths.out, &report)?;
    Ok(accuracy_table(&report))
}

pub fn run_lanes(cfg: &CliConfig, mode: Mode, workers: usize) -> Result<ExperimentReport> {
    let lanes = map_lanes(&cfg.experiment.seeds, workers, |&seed| {
        let (source, target) = cfg.domains(seed)?;
        Ok(run_lane_on(
            &cfg.experiment,
            mode,
            seed,
            &source,
            &target,
            &WallClock::new(),
        )?)
    })?;
    Ok(ExperimentReport::from_lanes(&cfg.experiment, mode, lanes))
}

/// Compare coreset strategies by calibrated accuracy on the source domain.
pub fn compare_subsets(cfg: &CliConfig, workers: usize) -> Result<String> {
    let exp = &cfg.experiment;
    let per_seed = map_lanes(&exp.seeds, workers, |&seed| {
        let (source, _) = cfg.domains(seed)?;
        Ok(subset_lane(exp, seed, &source)?)
    })?;
    let levels = bits_of(&exp.levels);
    let strats = strategies(&exp.levels);
    let cell = |seed_rows: &[qcore::harness::SubsetRow], s: Strategy, b: u8| {
        seed_rows
            .iter()
            .find(|r| r.strategy == s && r.bits == b)
            .map_or(f64::NAN, |r| r.accuracy)
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["seed".to_string(), "strategy".to_string()];
    header.extend(levels.iter().map(|b| format!("{b}-bit")));
    w.write_record(&header).expect("in-memory write");
    for (seed, rows) in exp.seeds.iter().zip(&per_seed) {
        for &s in &strats {
            let mut rec = vec![seed.to_string(), s.to_string()];
            rec.extend(levels.iter().map(|&b| cell(rows, s, b).to_string()));
            w.write_record(&rec).expect("in-memory write");
        }
    }
    write_atomic(&cfg.out("subsets.csv"), &w.into_inner().expect("in-memory write"))?;

    let mut out = String::new();
    let _ = write!(out, "{:>10}", "strategy");
    for b in &levels {
        let _ = write!(out, "{:>9}", format!("{b}-bit"));
    }
    let _ = writeln!(out, "{:>9}", "mean");
    for &s in &strats {
        let _ = write!(out, "{:>10}", s.to_string());
        let means: Vec<f64> = levels
            .iter()
            .map(|&b| per_seed.iter().map(|rows| cell(rows, s, b)).sum::<f64>() / per_seed.len() as f64)
            .collect();
        for m in &means {
            let _ = write!(out, "{m:>9.4}");
        }
        let _ = writeln!(out, "{:>9.4}", means.iter().sum::<f64>() / means.len() as f64);
    }
    Ok(out)
}

/// Run every mode and tabulate the mean stream accuracy per seed.
pub fn ablate(cfg: &CliConfig, workers: usize) -> Result<String> {
    let reports = Mode::ALL
        .iter()
        .map(|&m| run_lanes(cfg, m, workers))
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["seed".to_string()];
    header.extend(Mode::ALL.iter().map(|m| m.to_string()));
    w.write_record(&header).expect("in-memory write");
    let mut out = String::new();
    let _ = write!(out, "{:>8}", "seed");
    for m in Mode::ALL {
        let _ = write!(out, "{:>11}", m.as_str());
    }
    out.push('\n');
    for (s, seed) in cfg.experiment.seeds.iter().enumerate() {
        let means: Vec<f64> = reports.iter().map(|r| r.lane_mean(s)).collect();
        let mut rec = vec![seed.to_string()];
        rec.extend(means.iter().map(f64::to_string));
        w.write_record(&rec).expect("in-memory write");
        let _ = write!(out, "{seed:>8}");
        for m in &means {
            let _ = write!(out, "{m:>11.4}");
        }
        out.push('\n');
    }
    write_atomic(&cfg.out("ablation.csv"), &w.into_inner().expect("in-memory write"))?;
    for (mode, report) in Mode::ALL.iter().zip(&reports) {
        write_report(&cfg.out(mode.as_str()), report)?;
    }
    Ok(out)
}

/// Where `infoloss` takes its distribution from.
pub enum PmfSource {
    /// Summed distribution of a miss table file.
    Misses(PathBuf),
    /// Inline `k:N` pairs.
    Inline(String),
}

pub fn parse_pmf(s: &str) -> std::result::Result<MissPmf, String> {
    let bins = s
        .split(',')
        .map(|pair| {
            let (k, n) = pair.split_once(':').ok_or_else(|| format!("{pair:?} is not k:N"))?;
            let k = k.trim().parse().map_err(|_| format!("bad miss count {k:?}"))?;
            let n = n.trim().parse().map_err(|_| format!("bad population {n:?}"))?;
            Ok((k, n))
        })
        .collect::<std::result::Result<Vec<(u32, u64)>, String>>()?;
    Ok(MissPmf::from_bins(PmfLevel::Summed, bins))
}

/// Information loss of keeping a fraction `lambda` of a distribution; the
/// configured budget over the population when `lambda` is absent.
pub fn infoloss(cfg: &CliConfig, source: PmfSource, lambda: Option<f64>) -> Result<String> {
    let pmf = match source {
        PmfSource::Misses(path) => load_misses(&path)?.pmf(PmfLevel::Summed)?,
        PmfSource::Inline(s) => parse_pmf(&s).map_err(CliError::Usage)?,
    };
    let lambda = lambda.unwrap_or(cfg.experiment.core_budget as f64 / pmf.total().max(1) as f64);
    let report = info_loss(&pmf, lambda)?;
    let mut out = String::new();
    let _ = writeln!(out, "{}", pmf_line(&pmf));
    let _ = writeln!(out, "lambda {}", num(lambda));
    loss_lines(&mut out, &report);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_trim() {
        assert_eq!(num(0.04999999999999982), "0.05");
        assert_eq!(num(3.0), "3");
        assert_eq!(num(-1e-9), "0");
        assert_eq!(num(0.25), "0.25");
    }

    #[test]
    fn inline_pmf() {
        let p = parse_pmf("1:2, 2:3,3:9,4:4,5:2").unwrap();
        assert_eq!(p.total(), 20);
        assert!(parse_pmf("1-2").is_err());
    }
}
