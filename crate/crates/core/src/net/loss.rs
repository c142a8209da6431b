//! Cross-entropy losses, summed over the batch.

use ndarray::ArrayView2;

use super::Task;
use crate::error::{Error, Result};

/// Predictions are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` before taking logs.
pub const PROB_CLAMP: f64 = 1e-12;

fn clamp(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Categorical cross-entropy (multiclass) or binary cross-entropy
/// (multilabel), summed over every row and class.
pub fn loss(predicted: ArrayView2<f64>, targets: ArrayView2<f64>, task: Task) -> Result<f64> {
    if predicted.dim() != targets.dim() {
        return Err(Error::InvalidArgument(format!(
            "prediction shape {:?} vs target shape {:?}",
            predicted.dim(),
            targets.dim()
        )));
    }
    let total = match task {
        Task::Multiclass => predicted
            .iter()
            .zip(targets.iter())
            .filter(|(_, &y)| y != 0.0)
            .map(|(&p, &y)| -y * clamp(p).ln())
            .sum(),
        Task::Multilabel => predicted
            .iter()
            .zip(targets.iter())
            .map(|(&p, &y)| {
                let p = clamp(p);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum(),
    };
    Ok(total)
}

/// Batch-averaged loss; this is the objective the optimizer follows.
pub fn mean_loss(predicted: ArrayView2<f64>, targets: ArrayView2<f64>, task: Task) -> Result<f64> {
    let n = predicted.nrows().max(1) as f64;
    Ok(loss(predicted, targets, task)? / n)
}
