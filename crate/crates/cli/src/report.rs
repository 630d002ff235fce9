//! Stream experiment reports.
//!
//! `accuracy.csv`, `summary.toml`, `ops.csv` and the optional `epochs.csv`
//! depend only on the configuration. Wall-clock timings go to the separate
//! `runtimes.csv`.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use qcore::harness::{ExperimentReport, Phase};

use crate::error::{CliError, Result};
use crate::io::write_atomic;

#[derive(Serialize)]
struct LevelSummary {
    bits: u8,
    static_accuracy: f64,
    mean_accuracy: f64,
    bitflip_accuracy: f64,
    flip_classes: [u64; 3],
    max_code_step: u32,
    target_members: usize,
    final_core: Vec<u64>,
}

#[derive(Serialize)]
struct InfoLoss {
    full_mean: f64,
    core_mean: f64,
    epsilon: f64,
    bound: u32,
}

#[derive(Serialize)]
struct LaneSummary {
    seed: u64,
    fp_source_accuracy: f64,
    fp_target_accuracy: f64,
    mean_accuracy: f64,
    initial_core: Vec<u64>,
    warnings: Vec<String>,
    info_loss: InfoLoss,
    levels: Vec<LevelSummary>,
}

#[derive(Serialize)]
struct Summary {
    mode: String,
    calibrator: qcore::harness::Calibrator,
    levels: Vec<u8>,
    n_batches: usize,
    level_means: Vec<f64>,
    lanes: Vec<LaneSummary>,
}

fn level_header(report: &ExperimentReport) -> Vec<String> {
    report.levels.iter().map(|b| format!("{b}-bit")).collect()
}

fn csv(header: Vec<String>, rows: Vec<Vec<String>>) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory write")
}

/// `seed,batch,<b>-bit...`: accuracy on each batch's test slice.
pub fn accuracy_csv(report: &ExperimentReport) -> Vec<u8> {
    let mut header = vec!["seed".to_string(), "batch".to_string()];
    header.extend(level_header(report));
    let mut rows = Vec::new();
    for (s, lane) in report.lanes.iter().enumerate() {
        for b in 0..report.n_batches {
            let mut row = vec![lane.seed.to_string(), b.to_string()];
            row.extend((0..report.levels.len()).map(|l| report.accuracy(s, b, l).to_string()));
            rows.push(row);
        }
    }
    csv(header, rows)
}

pub fn summary_toml(report: &ExperimentReport) -> Result<String> {
    let summary = Summary {
        mode: report.mode.to_string(),
        calibrator: report.calibrator,
        levels: report.levels.clone(),
        n_batches: report.n_batches,
        level_means: report.level_means(),
        lanes: report
            .lanes
            .iter()
            .enumerate()
            .map(|(s, lane)| LaneSummary {
                seed: lane.seed,
                fp_source_accuracy: lane.fp_source_accuracy,
                fp_target_accuracy: lane.fp_target_accuracy,
                mean_accuracy: report.lane_mean(s),
                initial_core: lane.initial_core.clone(),
                warnings: lane.warnings.clone(),
                info_loss: InfoLoss {
                    full_mean: lane.info_loss.full_mean,
                    core_mean: lane.info_loss.core_mean,
                    epsilon: lane.info_loss.epsilon,
                    bound: lane.info_loss.bound,
                },
                levels: lane
                    .levels
                    .iter()
                    .enumerate()
                    .map(|(l, run)| LevelSummary {
                        bits: run.bits,
                        static_accuracy: run.static_accuracy,
                        mean_accuracy: report.lane_level_mean(s, l),
                        bitflip_accuracy: run.bitflip_accuracy,
                        flip_classes: run.flip_classes,
                        max_code_step: run.max_code_step,
                        target_members: run.target_members,
                        final_core: run.final_core.clone(),
                    })
                    .collect(),
            })
            .collect(),
    };
    toml::to_string(&summary).map_err(|e| CliError::Usage(format!("report does not fit the summary format: {e}")))
}

/// `seed,phase,macs,forward_passes,gradient_calls`.
pub fn ops_csv(report: &ExperimentReport) -> Vec<u8> {
    let header = ["seed", "phase", "macs", "forward_passes", "gradient_calls"]
        .map(String::from)
        .to_vec();
    let mut rows = Vec::new();
    for lane in &report.lanes {
        for phase in Phase::ALL {
            let o = lane.ledger.ops(phase);
            rows.push(vec![
                lane.seed.to_string(),
                phase.name().to_string(),
                o.macs.to_string(),
                o.forward_passes.to_string(),
                o.gradient_calls.to_string(),
            ]);
        }
    }
    csv(header, rows)
}

/// `seed,phase,micros`.
pub fn runtimes_csv(report: &ExperimentReport) -> Vec<u8> {
    let header = ["seed", "phase", "micros"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for lane in &report.lanes {
        for phase in Phase::ALL {
            rows.push(vec![
                lane.seed.to_string(),
                phase.name().to_string(),
                lane.ledger.micros(phase).to_string(),
            ]);
        }
    }
    csv(header, rows)
}

/// `seed,bits,batch,epoch,accuracy` when epochs were traced.
pub fn epochs_csv(report: &ExperimentReport) -> Option<Vec<u8>> {
    let mut rows = Vec::new();
    for lane in &report.lanes {
        for run in &lane.levels {
            for (b, trace) in run.epoch_accuracy.iter().enumerate() {
                for (e, acc) in trace.iter().enumerate() {
                    rows.push(vec![
                        lane.seed.to_string(),
                        run.bits.to_string(),
                        b.to_string(),
                        (e + 1).to_string(),
                        acc.to_string(),
                    ]);
                }
            }
        }
    }
    if rows.is_empty() {
        return None;
    }
    Some(csv(
        ["seed", "bits", "batch", "epoch", "accuracy"]
            .map(String::from)
            .to_vec(),
        rows,
    ))
}

pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<()> {
    write_atomic(&dir.join("accuracy.csv"), &accuracy_csv(report))?;
    write_atomic(&dir.join("summary.toml"), summary_toml(report)?.as_bytes())?;
    write_atomic(&dir.join("ops.csv"), &ops_csv(report))?;
    write_atomic(&dir.join("runtimes.csv"), &runtimes_csv(report))?;
    if let Some(bytes) = epochs_csv(report) {
        write_atomic(&dir.join("epochs.csv"), &bytes)?;
    }
    Ok(())
}

/// Per-seed and overall mean accuracy per level, as printed on stdout.
pub fn accuracy_table(report: &ExperimentReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "mode {}  calibrator {:?}  {} seed(s) x {} batches",
        report.mode,
        report.calibrator,
        report.lanes.len(),
        report.n_batches
    );
    let _ = write!(out, "{:>8}", "seed");
    for h in level_header(report) {
        let _ = write!(out, "{h:>9}");
    }
    out.push('\n');
    for (s, lane) in report.lanes.iter().enumerate() {
        let _ = write!(out, "{:>8}", lane.seed);
        for l in 0..report.levels.len() {
            let _ = write!(out, "{:>9.4}", report.lane_level_mean(s, l));
        }
        out.push('\n');
    }
    let _ = write!(out, "{:>8}", "mean");
    for m in report.level_means() {
        let _ = write!(out, "{m:>9.4}");
    }
    out.push('\n');
    out
}
