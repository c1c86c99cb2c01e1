//! Ranking metrics for heavily imbalanced labels.

use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MetricsError {
    LengthMismatch { scores: usize, labels: usize },
    NoPositives,
    NonFiniteScore { index: usize },
    InvalidLabel { index: usize, label: u8 },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch { scores, labels } => {
                write!(f, "{scores} scores but {labels} labels")
            }
            MetricsError::NoPositives => write!(f, "metric undefined without positive labels"),
            MetricsError::NonFiniteScore { index } => write!(f, "non-finite score at {index}"),
            MetricsError::InvalidLabel { index, label } => {
                write!(f, "label {label} at {index} is not in {{0, 1}}")
            }
        }
    }
}

impl core::error::Error for MetricsError {}

/// Area under the precision-recall curve in its average-precision form.
///
/// Items are ranked by score descending (ties broken by original index);
/// `AP = sum_k (recall_k - recall_{k-1}) * precision_k`, which accumulates
/// the precision at each positive hit divided by the positive count.
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore { index });
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 1) {
        return Err(MetricsError::InvalidLabel { index, label });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 {
        return Err(MetricsError::NoPositives);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });

    let mut true_positives = 0usize;
    let mut ap = 0.0;
    for (rank, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            true_positives += 1;
            ap += true_positives as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / positives as f64)
}
