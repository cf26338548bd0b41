use super::PredictorError;
use crate::scalar::Scalar;

/// Rank-sum AUC with average ranks for ties.
pub fn auc<F: Scalar>(scores: &[F], labels: &[bool]) -> Result<f64, PredictorError> {
    if scores.len() != labels.len() {
        return Err(PredictorError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(PredictorError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].as_f64().total_cmp(&scores[b].as_f64()));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum_pos += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

/// Mean one-vs-rest AUC over classes that have both positives and
/// negatives in `y`.
pub fn macro_auc(class_scores: &[Vec<f64>], y: &[usize]) -> Result<f64, PredictorError> {
    let n_classes = class_scores.first().map_or(0, Vec::len);
    let mut total = 0.0;
    let mut used = 0;
    for k in 0..n_classes {
        let labels: Vec<bool> = y.iter().map(|&c| c == k).collect();
        let scores: Vec<f64> = class_scores.iter().map(|s| s[k]).collect();
        match auc(&scores, &labels) {
            Ok(a) => {
                total += a;
                used += 1;
            }
            Err(PredictorError::SingleClass) => {}
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(PredictorError::SingleClass);
    }
    Ok(total / used as f64)
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r2<F: Scalar>(preds: &[F], targets: &[F]) -> Result<F, PredictorError> {
    if preds.len() != targets.len() {
        return Err(PredictorError::LengthMismatch(preds.len(), targets.len()));
    }
    let n = F::lit(targets.len() as f64);
    let mean = targets.iter().copied().sum::<F>() / n;
    let ss_tot: F = targets.iter().map(|&y| (y - mean).powi(2)).sum();
    if targets.len() < 2 || ss_tot == F::zero() {
        return Err(PredictorError::ZeroVariance);
    }
    let ss_res: F = preds.iter().zip(targets).map(|(&p, &y)| (y - p).powi(2)).sum();
    Ok(F::one() - ss_res / ss_tot)
}

pub fn accuracy(pred: &[bool], truth: &[bool]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64
}
