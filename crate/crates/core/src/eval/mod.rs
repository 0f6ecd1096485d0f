//! Metrics and experiment protocols.

pub mod csv_out;
pub mod metrics;
pub mod report;
pub mod suite;

pub use metrics::{micro_auc, ranking, recall_at_k, rmse_log_time};
pub use report::{
    bucket_of, cold_start_from_records, cold_start_report, collect_records, evaluate, patient_records, time_baseline_rmse,
    BucketReport, ColdStartReport, MetricReport, PredictionRecord, BUCKETS, DEFAULT_KS,
};
pub use csv_out::{metrics_rows, write_ablation_csv, write_comments, write_metrics_csv, write_sweep_csv, write_training_log, MetricsRow, METRICS_HEADER};
pub use suite::{ablation_suite, run_variant, sweep, AblationTable, Experiment, SweepGrid, SweepRow, VariantRun, VariantSummary};
