//! Accuracy and macro-averaged precision and recall.

use serde::{Deserialize, Serialize};

use super::EvalError;

pub const CLASSES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub accuracy: f64,
    /// Unweighted mean of the per-class precisions.
    pub precision: f64,
    /// Unweighted mean of the per-class recalls.
    pub recall: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: [[usize; CLASSES]; CLASSES],
}

impl MetricSet {
    pub fn total(&self) -> usize {
        self.confusion.iter().flatten().sum()
    }

    /// Per-class precision; an empty denominator gives 0.
    pub fn class_precision(&self) -> [f64; CLASSES] {
        std::array::from_fn(|c| {
            let predicted: usize = (0..CLASSES).map(|t| self.confusion[t][c]).sum();
            ratio(self.confusion[c][c], predicted)
        })
    }

    /// Per-class recall; an empty denominator gives 0.
    pub fn class_recall(&self) -> [f64; CLASSES] {
        std::array::from_fn(|c| ratio(self.confusion[c][c], self.confusion[c].iter().sum()))
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(predictions: &[usize], labels: &[usize]) -> Result<MetricSet, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::Validation(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(EvalError::Validation("no predictions to score".into()));
    }
    let mut confusion = [[0usize; CLASSES]; CLASSES];
    for (i, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        if p >= CLASSES || t >= CLASSES {
            return Err(EvalError::Validation(format!(
                "pair {i}: prediction {p} / label {t} outside 0..{CLASSES}"
            )));
        }
        confusion[t][p] += 1;
    }
    let mut m = MetricSet {
        accuracy: 0.0,
        precision: 0.0,
        recall: 0.0,
        confusion,
    };
    let correct: usize = (0..CLASSES).map(|c| confusion[c][c]).sum();
    m.accuracy = correct as f64 / labels.len() as f64;
    m.precision = m.class_precision().iter().sum::<f64>() / CLASSES as f64;
    m.recall = m.class_recall().iter().sum::<f64>() / CLASSES as f64;
    Ok(m)
}
