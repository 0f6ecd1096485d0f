use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::metrics::{micro_auc, recall_at_k, rmse_log_time};
use crate::cascade::CascadeModel;
use crate::data::Patient;
use crate::error::{invalid, Result};
use crate::scalar::Real;

pub const DEFAULT_KS: [usize; 3] = [10, 20, 30];

/// Cold-start buckets over patient length: `(lo, hi]`.
pub const BUCKETS: [(usize, usize); 4] = [(0, 2), (2, 5), (5, 10), (10, 20)];

pub fn bucket_label(b: (usize, usize)) -> String {
    format!("({},{}]", b.0, b.1)
}

/// Bucket index of a patient with `n` visits; `None` above the last bound.
pub fn bucket_of(n: usize) -> Option<usize> {
    BUCKETS.iter().position(|&(lo, hi)| n > lo && n <= hi)
}

/// One next-visit prediction and its outcome.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub prev_time: f64,
    pub true_time: f64,
    pub pred_time: f64,
    pub probs: Vec<f64>,
    pub truth: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_patients: usize,
    pub n_predictions: usize,
    pub rmse_log_time: f64,
    pub recall_at: BTreeMap<usize, f64>,
    /// Absent when the pooled labels are all of one class.
    pub micro_auc: Option<f64>,
    /// Predictions whose true code set was empty.
    pub skipped_recall: usize,
}

impl MetricReport {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recall_at.get(&k).copied()
    }

    /// Metrics over a set of prediction records grouped by patient.
    pub fn from_records(patients: &[Vec<PredictionRecord>], ks: &[usize]) -> Result<Self> {
        let recs: Vec<&PredictionRecord> = patients.iter().flatten().collect();
        if recs.is_empty() {
            return invalid("no predictions to score");
        }
        let pred: Vec<f64> = recs.iter().map(|r| r.pred_time).collect();
        let truth: Vec<f64> = recs.iter().map(|r| r.true_time).collect();
        let prev: Vec<f64> = recs.iter().map(|r| r.prev_time).collect();
        let rmse = rmse_log_time(&pred, &truth, &prev)?;
        let mut recall_at = BTreeMap::new();
        let mut skipped = 0;
        for &k in ks {
            let vals: Vec<f64> = recs.iter().filter_map(|r| recall_at_k(&r.probs, &r.truth, k)).collect();
            skipped = recs.len() - vals.len();
            if !vals.is_empty() {
                recall_at.insert(k, vals.iter().sum::<f64>() / vals.len() as f64);
            }
        }
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for r in &recs {
            scores.extend_from_slice(&r.probs);
            let mut l = vec![false; r.probs.len()];
            for &c in &r.truth {
                l[c] = true;
            }
            labels.extend(l);
        }
        let micro_auc = micro_auc(&scores, &labels).ok();
        Ok(Self {
            n_patients: patients.iter().filter(|p| !p.is_empty()).count(),
            n_predictions: recs.len(),
            rmse_log_time: rmse,
            recall_at,
            micro_auc,
            skipped_recall: skipped,
        })
    }
}

/// Predictions for visits `2..=N` of a patient (within the model's
/// sequence-length cap), each made from the visits before it.
pub fn patient_records<T: Real>(model: &CascadeModel<T>, p: &Patient) -> Result<Vec<PredictionRecord>> {
    let visits = model.truncate(&p.visits);
    if visits.len() < 2 {
        return Ok(Vec::new());
    }
    let preds = model.predict_steps(visits, visits.len() - 1)?;
    Ok(preds
        .into_iter()
        .zip(visits.windows(2))
        .map(|(pr, w)| PredictionRecord {
            prev_time: w[0].time,
            true_time: w[1].time,
            pred_time: pr.t_hat.as_f64(),
            probs: pr.probs.iter().map(|x| x.as_f64()).collect(),
            truth: w[1].codes.clone(),
        })
        .collect())
}

pub fn collect_records<T: Real>(model: &CascadeModel<T>, patients: &[Patient]) -> Result<Vec<Vec<PredictionRecord>>> {
    patients.iter().map(|p| patient_records(model, p)).collect()
}

pub fn evaluate<T: Real>(model: &CascadeModel<T>, patients: &[Patient], ks: &[usize]) -> Result<MetricReport> {
    MetricReport::from_records(&collect_records(model, patients)?, ks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub label: String,
    pub bounds: (usize, usize),
    /// `None` when no patient falls in the bucket.
    pub report: Option<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColdStartReport {
    pub buckets: Vec<BucketReport>,
    /// Patients longer than the last bucket bound.
    pub overflow: usize,
    /// Single-visit patients left out.
    pub excluded_single_visit: usize,
}

/// Split prediction records by patient length into the cold-start buckets.
pub fn cold_start_from_records(patients: &[Patient], records: &[Vec<PredictionRecord>], ks: &[usize]) -> Result<ColdStartReport> {
    if patients.len() != records.len() {
        return invalid("records do not align with patients");
    }
    let mut grouped: Vec<Vec<Vec<PredictionRecord>>> = vec![Vec::new(); BUCKETS.len()];
    let mut overflow = 0;
    let mut excluded = 0;
    for (p, r) in patients.iter().zip(records) {
        if p.len() < 2 {
            excluded += 1;
            continue;
        }
        match bucket_of(p.len()) {
            Some(b) => grouped[b].push(r.clone()),
            None => overflow += 1,
        }
    }
    let buckets = BUCKETS
        .iter()
        .zip(grouped)
        .map(|(&bounds, g)| {
            let report = if g.is_empty() { None } else { Some(MetricReport::from_records(&g, ks)?) };
            Ok(BucketReport { label: bucket_label(bounds), bounds, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ColdStartReport { buckets, overflow, excluded_single_visit: excluded })
}

pub fn cold_start_report<T: Real>(model: &CascadeModel<T>, patients: &[Patient], ks: &[usize]) -> Result<ColdStartReport> {
    if patients.is_empty() {
        return invalid("empty test split");
    }
    let records = collect_records(model, patients)?;
    cold_start_from_records(patients, &records, ks)
}

/// RMSE of a time-only predictor over visits `2..=N` of every patient.
pub fn time_baseline_rmse(patients: &[Patient], predict: impl Fn(&[f64]) -> Result<f64>) -> Result<(f64, usize)> {
    let (mut pred, mut truth, mut prev) = (Vec::new(), Vec::new(), Vec::new());
    for p in patients {
        let times = p.times();
        for i in 1..times.len() {
            pred.push(predict(&times[..i])?);
            truth.push(times[i]);
            prev.push(times[i - 1]);
        }
    }
    Ok((rmse_log_time(&pred, &truth, &prev)?, pred.len()))
}
