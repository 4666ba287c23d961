//! Run artifact emission: metrics JSON, accuracy-matrix / loss / drift CSVs,
//! and a plain-text summary table. All output is byte-deterministic for a
//! given set of records; wall-clock time is never written.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::config::MethodFlags;
use crate::error::ReportError;
use crate::metrics::{AccuracyMatrix, DriftProbe, DriftSummary};
use crate::runner::{AnchorStats, MetricsSummary, RunRecord};
use crate::training::StepRecord;

/// Summary-level view of one run for `metrics.json`. Per-sample drift records
/// and per-step losses live in the CSVs.
#[derive(Debug, Serialize)]
struct RunReport<'a> {
    label: &'a str,
    config_hash: &'a str,
    seed: u64,
    flags: MethodFlags,
    metrics: &'a MetricsSummary,
    matrix: &'a AccuracyMatrix,
    anchor_stats: &'a [AnchorStats],
    /// One summary per probed stage, in stage order. Divergences are in nats.
    drift_summaries: Vec<&'a DriftSummary>,
}

fn run_report(r: &RunRecord) -> RunReport<'_> {
    RunReport {
        label: &r.label,
        config_hash: &r.config_hash,
        seed: r.seed,
        flags: r.flags,
        metrics: &r.metrics,
        matrix: &r.matrix,
        anchor_stats: &r.anchor_stats,
        drift_summaries: r.drift.iter().map(|p| &p.summary).collect(),
    }
}

/// Serialized form of `metrics.json` for a set of records.
pub fn metrics_json(records: &[RunRecord]) -> Result<String, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let reports: Vec<RunReport> = records.iter().map(run_report).collect();
    let mut out = serde_json::to_string_pretty(&reports)?;
    out.push('\n');
    Ok(out)
}

/// CSV of the accuracy matrix: one row per completed stage, one column per
/// task; cells outside the defined region (future tasks beyond the pre-
/// evaluation) are empty.
pub fn accuracy_matrix_csv(m: &AccuracyMatrix) -> String {
    let mut out = String::from("stage");
    for j in 0..m.num_tasks {
        out.push_str(&format!(",task_{j}"));
    }
    out.push('\n');
    for i in 0..m.stages() {
        out.push_str(&i.to_string());
        for j in 0..m.num_tasks {
            out.push(',');
            if let Some(v) = m.get(i, j) {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// CSV of the per-step loss history, concatenated across tasks with globally
/// increasing step and epoch counters.
pub fn losses_csv(task_histories: &[Vec<StepRecord>]) -> String {
    let mut out = String::from("step,epoch,loss_cls,loss_acgd,loss_tsgr,loss_total,lr\n");
    let mut step_base = 0;
    let mut epoch_base = 0;
    for history in task_histories {
        for r in history {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                step_base + r.step,
                epoch_base + r.epoch,
                r.loss_cls,
                r.loss_acgd,
                r.loss_tsgr,
                r.loss_total,
                r.lr
            ));
        }
        if let Some(last) = history.last() {
            step_base += last.step + 1;
            epoch_base += last.epoch + 1;
        }
    }
    out
}

/// CSV of one drift probe's per-sample records. JSD values are in nats.
pub fn drift_csv(probe: &DriftProbe) -> String {
    let mut out = String::from("sample_id,own_class_cosine,jsd,partition\n");
    for r in &probe.records {
        let partition = match r.partition {
            crate::metrics::DriftPartition::Boundary => "boundary",
            crate::metrics::DriftPartition::Core => "core",
        };
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.sample_id, r.own_class_cosine, r.jsd, partition
        ));
    }
    out
}

/// Plain-text table with one row per run, mirroring a component-ablation
/// layout: flag columns plus the headline metrics.
pub fn summary_table(records: &[RunRecord]) -> Result<String, ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    let mut out = String::new();
    out.push_str(&format!(
        "{:<28} {:>4} {:>4} {:>4} {:>4} {:>8} {:>8} {:>8} {:>8} {:>10}\n",
        "run", "ACGD", "TSGR", "PT", "VB", "Avg", "Last", "FWT", "BWT", "Forgetting"
    ));
    let mark = |b: bool| if b { "x" } else { "-" };
    for r in records {
        out.push_str(&format!(
            "{:<28} {:>4} {:>4} {:>4} {:>4} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10.4}\n",
            r.label,
            mark(r.flags.acgd),
            mark(r.flags.tsgr),
            mark(r.flags.prototype_transfer),
            mark(r.flags.visual_branch),
            r.metrics.avg,
            r.metrics.last,
            r.metrics.fwt,
            r.metrics.bwt,
            r.metrics.forgetting
        ));
    }
    Ok(out)
}

fn write_record_files(dir: &Path, r: &RunRecord) -> Result<(), ReportError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("accuracy_matrix.csv"), accuracy_matrix_csv(&r.matrix))?;
    fs::write(dir.join("losses.csv"), losses_csv(&r.task_histories))?;
    if let Some(probe) = r.drift.first() {
        fs::write(dir.join("drift.csv"), drift_csv(probe))?;
    }
    Ok(())
}

/// Write all artifacts for a set of runs. `metrics.json` and `summary.txt`
/// land in `dir`; per-run CSVs land in `dir` directly for a single run and in
/// a per-label subdirectory for grids.
pub fn emit_report(dir: &Path, records: &[RunRecord]) -> Result<(), ReportError> {
    if records.is_empty() {
        return Err(ReportError::Empty);
    }
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.json"), metrics_json(records)?)?;
    fs::write(dir.join("summary.txt"), summary_table(records)?)?;
    if records.len() == 1 {
        write_record_files(dir, &records[0])?;
    } else {
        for r in records {
            write_record_files(&dir.join(&r.label), r)?;
        }
    }
    Ok(())
}
