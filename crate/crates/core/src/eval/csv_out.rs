//! CSV emitters. Every file starts with `#` comment lines carrying the run
//! configuration and input hashes, followed by a header row.
//!
//! `metrics.csv` columns: `scope,variant,seed,bucket,n_patients,n_predictions,
//! rmse_log_time,recall_at_10,recall_at_20,recall_at_30,micro_auc`. `scope` is
//! `overall` or `cold_start`; `bucket` is empty for overall rows, and a
//! cold-start bucket without patients is written with empty metric cells.

use std::io::Write;

use super::report::{ColdStartReport, MetricReport, DEFAULT_KS};
use super::suite::{AblationTable, MeanSd, SweepRow};
use crate::cascade::train::EpochLog;
use crate::error::Result;

/// Write `# key: value` lines.
pub fn write_comments(w: &mut impl Write, comments: &[(String, String)]) -> Result<()> {
    for (k, v) in comments {
        writeln!(w, "# {k}: {}", v.replace('\n', " "))?;
    }
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: [&str; 11] = [
    "scope",
    "variant",
    "seed",
    "bucket",
    "n_patients",
    "n_predictions",
    "rmse_log_time",
    "recall_at_10",
    "recall_at_20",
    "recall_at_30",
    "micro_auc",
];

/// One `metrics.csv` row source.
pub struct MetricsRow<'a> {
    pub scope: &'a str,
    pub variant: &'a str,
    pub seed: Option<u64>,
    pub bucket: &'a str,
    pub report: Option<&'a MetricReport>,
}

fn metric_cells(r: Option<&MetricReport>) -> Vec<String> {
    let mut cells = vec![
        r.map(|r| r.n_patients.to_string()).unwrap_or_else(|| "0".into()),
        r.map(|r| r.n_predictions.to_string()).unwrap_or_else(|| "0".into()),
        opt(r.map(|r| r.rmse_log_time)),
    ];
    for k in DEFAULT_KS {
        cells.push(opt(r.and_then(|r| r.recall(k))));
    }
    cells.push(opt(r.and_then(|r| r.micro_auc)));
    cells
}

pub fn write_metrics_csv(mut w: impl Write, comments: &[(String, String)], rows: &[MetricsRow]) -> Result<()> {
    write_comments(&mut w, comments)?;
    let mut cw = csv::Writer::from_writer(w);
    cw.write_record(METRICS_HEADER)?;
    for row in rows {
        let mut rec = vec![row.scope.to_string(), row.variant.to_string(), row.seed.map(|s| s.to_string()).unwrap_or_default(), row.bucket.to_string()];
        rec.extend(metric_cells(row.report));
        cw.write_record(&rec)?;
    }
    cw.flush()?;
    Ok(())
}

/// Overall row plus one row per cold-start bucket.
pub fn metrics_rows<'a>(variant: &'a str, seed: Option<u64>, overall: &'a MetricReport, cold: &'a ColdStartReport) -> Vec<MetricsRow<'a>> {
    let mut rows = vec![MetricsRow { scope: "overall", variant, seed, bucket: "", report: Some(overall) }];
    for b in &cold.buckets {
        rows.push(MetricsRow { scope: "cold_start", variant, seed, bucket: &b.label, report: b.report.as_ref() });
    }
    rows
}

fn mean_sd_cells(m: Option<MeanSd>) -> [String; 2] {
    [opt(m.map(|m| m.mean)), opt(m.map(|m| m.sd))]
}

/// Mean ± sd per variant.
pub fn write_ablation_csv(mut w: impl Write, comments: &[(String, String)], table: &AblationTable) -> Result<()> {
    write_comments(&mut w, comments)?;
    let mut cw = csv::Writer::from_writer(w);
    let mut header = vec!["variant".to_string(), "runs".into(), "diverged".into(), "rmse_log_time_mean".into(), "rmse_log_time_sd".into()];
    for k in DEFAULT_KS {
        header.push(format!("recall_at_{k}_mean"));
        header.push(format!("recall_at_{k}_sd"));
    }
    header.push("micro_auc_mean".into());
    header.push("micro_auc_sd".into());
    cw.write_record(&header)?;
    for s in &table.summary {
        let mut rec = vec![s.variant.label().to_string(), s.runs.to_string(), s.diverged.to_string()];
        rec.extend(mean_sd_cells(s.rmse_log_time));
        for k in DEFAULT_KS {
            let m = s.recall_at.iter().find(|(kk, _)| *kk == k).and_then(|(_, m)| *m);
            rec.extend(mean_sd_cells(m));
        }
        rec.extend(mean_sd_cells(s.micro_auc));
        cw.write_record(&rec)?;
    }
    cw.flush()?;
    Ok(())
}

pub fn write_sweep_csv(mut w: impl Write, comments: &[(String, String)], rows: &[SweepRow]) -> Result<()> {
    write_comments(&mut w, comments)?;
    let mut cw = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["alpha", "beta", "marker_dim", "time_dim", "seed", "diverged", "final_loss"].map(String::from).to_vec();
    header.extend(METRICS_HEADER[4..].iter().map(|s| s.to_string()));
    cw.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.alpha.to_string(),
            r.beta.to_string(),
            r.marker_dim.to_string(),
            r.time_dim.to_string(),
            r.run.seed.to_string(),
            r.run.diverged.to_string(),
            opt(r.run.final_loss),
        ];
        rec.extend(metric_cells(r.run.report.as_ref()));
        cw.write_record(&rec)?;
    }
    cw.flush()?;
    Ok(())
}

/// Training log: one row per epoch. Metrics on the training split, when
/// given, fill the extra columns of the last row.
pub fn write_training_log(mut w: impl Write, comments: &[(String, String)], logs: &[EpochLog], final_metrics: Option<&MetricReport>) -> Result<()> {
    write_comments(&mut w, comments)?;
    let mut cw = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["epoch", "step", "loss"].map(String::from).to_vec();
    header.extend(METRICS_HEADER[5..].iter().map(|s| format!("train_{s}")));
    cw.write_record(&header)?;
    for (i, l) in logs.iter().enumerate() {
        let mut rec = vec![l.epoch.to_string(), l.step.to_string(), l.loss.to_string()];
        let last = i + 1 == logs.len();
        let cells = metric_cells(final_metrics.filter(|_| last));
        rec.extend(cells[1..].iter().map(|c| if final_metrics.is_some() && last { c.clone() } else { String::new() }));
        cw.write_record(&rec)?;
    }
    cw.flush()?;
    Ok(())
}
