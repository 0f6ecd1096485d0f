use crate::data::MIN_GAP_DAYS;
use crate::error::{invalid, Result};

/// RMSE between predicted and true log gaps; predicted gaps are floored at
/// one hour like the inputs.
pub fn rmse_log_time(pred: &[f64], truth: &[f64], prev: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != prev.len() {
        return invalid(format!("length mismatch: {} predicted, {} true, {} previous", pred.len(), truth.len(), prev.len()));
    }
    if pred.is_empty() {
        return invalid("no predictions to score");
    }
    let mut sum = 0.0;
    for ((&p, &t), &s) in pred.iter().zip(truth).zip(prev) {
        if t < s {
            return invalid(format!("true time {t} precedes previous time {s}"));
        }
        let d = (p - s).max(MIN_GAP_DAYS).ln() - (t - s).max(MIN_GAP_DAYS).ln();
        sum += d * d;
    }
    Ok((sum / pred.len() as f64).sqrt())
}

/// Indices by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Share of `truth` found among the `k` highest scores; `None` for an empty truth set.
pub fn recall_at_k(scores: &[f64], truth: &[usize], k: usize) -> Option<f64> {
    if truth.is_empty() || k == 0 {
        return None;
    }
    let top = &ranking(scores)[..k.min(scores.len())];
    let hits = truth.iter().filter(|c| top.contains(c)).count();
    Some(hits as f64 / truth.len() as f64)
}

/// Area under the ROC curve of pooled binary labels, by the rank-sum
/// statistic with tied scores sharing their mean rank.
pub fn micro_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return invalid("scores and labels differ in length");
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return invalid("AUC needs at least one positive and one negative label");
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse_log_time(&[5.0, 7.0], &[5.0, 7.0], &[1.0, 2.0]).unwrap(), 0.0);
        let e = std::f64::consts::E;
        assert!((rmse_log_time(&[e], &[1.0], &[0.0]).unwrap() - 1.0).abs() < 1e-12);
        let a = rmse_log_time(&[3.0, 9.0], &[4.0, 6.0], &[1.0, 2.0]).unwrap();
        let b = rmse_log_time(&[103.0, 109.0], &[104.0, 106.0], &[101.0, 102.0]).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(rmse_log_time(&[1.0], &[1.0, 2.0], &[0.0]).is_err());
    }

    #[test]
    fn recall_examples() {
        // ranking [a, c, b, ...]
        let scores = [0.9, 0.5, 0.7, 0.1];
        assert_eq!(recall_at_k(&scores, &[0, 1], 2), Some(0.5));
        assert_eq!(recall_at_k(&scores, &[0, 2], 2), Some(1.0));
        assert_eq!(recall_at_k(&scores, &[3], 10), Some(1.0));
        assert_eq!(recall_at_k(&scores, &[], 2), None);
        // ties resolve to the lower index
        assert_eq!(ranking(&[0.5, 0.5, 0.5]), vec![0, 1, 2]);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(micro_auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(micro_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
        assert!(micro_auc(&[0.5, 0.6], &[true, true]).is_err());
    }
}
