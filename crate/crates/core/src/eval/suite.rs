use serde::{Deserialize, Serialize};

use super::report::{cold_start_from_records, collect_records, ColdStartReport, MetricReport, DEFAULT_KS};
use crate::cascade::{LossWeights, ModelConfig, TrainConfig, Trainer, Variant};
use crate::data::DatasetSplit;
use crate::error::{invalid, Error, Result};

/// Model and training settings shared by every run of a protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub ks: Vec<usize>,
}

impl Experiment {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Self { model, train, ks: DEFAULT_KS.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub variant: Variant,
    pub seed: u64,
    pub final_loss: Option<f64>,
    pub report: Option<MetricReport>,
    pub cold_start: Option<ColdStartReport>,
    /// Set when training produced a non-finite value.
    pub diverged: bool,
    pub message: Option<String>,
}

/// Train `variant` on the training split with `seed` and score it on the test split.
pub fn run_variant(split: &DatasetSplit, exp: &Experiment, variant: Variant, seed: u64) -> Result<VariantRun> {
    let mut model_cfg = exp.model;
    model_cfg.ablation = variant.ablation();
    train_and_score(split, exp, model_cfg, TrainConfig { seed, ..exp.train }, variant)
}

fn train_and_score(split: &DatasetSplit, exp: &Experiment, model_cfg: ModelConfig, train_cfg: TrainConfig, variant: Variant) -> Result<VariantRun> {
    let seed = train_cfg.seed;
    let diverged = |e: Error| VariantRun {
        variant,
        seed,
        final_loss: None,
        report: None,
        cold_start: None,
        diverged: true,
        message: Some(e.to_string()),
    };
    let mut trainer = Trainer::<f64>::new(model_cfg, train_cfg, &split.train)?;
    let logs = match trainer.fit(&split.train, |_| {}) {
        Ok(l) => l,
        Err(e @ Error::NonFinite(_)) => return Ok(diverged(e)),
        Err(e) => return Err(e),
    };
    let records = match collect_records(&trainer.model, &split.test) {
        Ok(r) => r,
        Err(e @ Error::NonFinite(_)) => return Ok(diverged(e)),
        Err(e) => return Err(e),
    };
    let report = MetricReport::from_records(&records, &exp.ks)?;
    let cold = cold_start_from_records(&split.test, &records, &exp.ks)?;
    Ok(VariantRun {
        variant,
        seed,
        final_loss: logs.last().map(|l| l.loss),
        report: Some(report),
        cold_start: Some(cold),
        diverged: false,
        message: None,
    })
}

/// Mean and sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        Some(Self { mean, sd })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: Variant,
    pub runs: usize,
    pub diverged: usize,
    pub rmse_log_time: Option<MeanSd>,
    pub recall_at: Vec<(usize, Option<MeanSd>)>,
    pub micro_auc: Option<MeanSd>,
}

impl VariantSummary {
    pub fn of(variant: Variant, runs: &[&VariantRun], ks: &[usize]) -> Self {
        let ok: Vec<&MetricReport> = runs.iter().filter_map(|r| r.report.as_ref()).collect();
        let rmse: Vec<f64> = ok.iter().map(|r| r.rmse_log_time).collect();
        let recall_at = ks.iter().map(|&k| (k, MeanSd::of(&ok.iter().filter_map(|r| r.recall(k)).collect::<Vec<_>>()))).collect();
        let auc: Vec<f64> = ok.iter().filter_map(|r| r.micro_auc).collect();
        Self {
            variant,
            runs: runs.len(),
            diverged: runs.iter().filter(|r| r.diverged).count(),
            rmse_log_time: MeanSd::of(&rmse),
            recall_at,
            micro_auc: MeanSd::of(&auc),
        }
    }

    pub fn recall_mean(&self, k: usize) -> Option<f64> {
        self.recall_at.iter().find(|(kk, _)| *kk == k).and_then(|(_, m)| m.map(|m| m.mean))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<VariantRun>,
    pub summary: Vec<VariantSummary>,
}

impl AblationTable {
    pub fn summary_of(&self, v: Variant) -> Option<&VariantSummary> {
        self.summary.iter().find(|s| s.variant == v)
    }
}

/// Train every variant with every seed, sequentially, and summarise.
/// Diverged runs are flagged and the suite carries on.
pub fn ablation_suite(
    split: &DatasetSplit,
    exp: &Experiment,
    variants: &[Variant],
    seeds: &[u64],
    mut on_run: impl FnMut(&VariantRun),
) -> Result<AblationTable> {
    if seeds.len() < 3 {
        return invalid("the ablation suite needs at least three seeds");
    }
    let mut runs = Vec::new();
    for &v in variants {
        for &s in seeds {
            let run = run_variant(split, exp, v, s)?;
            on_run(&run);
            runs.push(run);
        }
    }
    let summary = variants
        .iter()
        .map(|&v| VariantSummary::of(v, &runs.iter().filter(|r| r.variant == v).collect::<Vec<_>>(), &exp.ks))
        .collect();
    Ok(AblationTable { runs, summary })
}

/// Sensitivity grid over the loss weights and embedding widths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub marker_dim: Vec<usize>,
    pub time_dim: Vec<usize>,
}

impl SweepGrid {
    /// Every value fixed at the experiment's setting.
    pub fn single(exp: &Experiment) -> Self {
        Self {
            alpha: vec![exp.train.weights.alpha],
            beta: vec![exp.train.weights.beta],
            marker_dim: vec![exp.model.marker_dim],
            time_dim: vec![exp.model.time_dim],
        }
    }

    pub fn len(&self) -> usize {
        self.alpha.len() * self.beta.len() * self.marker_dim.len() * self.time_dim.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub beta: f64,
    pub marker_dim: usize,
    pub time_dim: usize,
    pub run: VariantRun,
}

/// Full-model runs over the grid, one per cell and seed.
pub fn sweep(split: &DatasetSplit, exp: &Experiment, grid: &SweepGrid, seeds: &[u64], mut on_row: impl FnMut(&SweepRow)) -> Result<Vec<SweepRow>> {
    if grid.is_empty() || seeds.is_empty() {
        return invalid("sweep grid and seed list must be non-empty");
    }
    let mut rows = Vec::with_capacity(grid.len() * seeds.len());
    for &alpha in &grid.alpha {
        for &beta in &grid.beta {
            for &marker_dim in &grid.marker_dim {
                for &time_dim in &grid.time_dim {
                    for &seed in seeds {
                        let model_cfg = ModelConfig { marker_dim, time_dim, ..exp.model };
                        model_cfg.validate()?;
                        let train_cfg = TrainConfig { seed, weights: LossWeights { alpha, beta }, ..exp.train };
                        let run = train_and_score(split, exp, model_cfg, train_cfg, Variant::Full)?;
                        let row = SweepRow { alpha, beta, marker_dim, time_dim, run };
                        on_row(&row);
                        rows.push(row);
                    }
                }
            }
        }
    }
    Ok(rows)
}
