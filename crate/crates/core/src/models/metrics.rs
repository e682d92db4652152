use serde::{Deserialize, Serialize};

use super::{ClassDistribution, ModelError};
use crate::cohort::{DiagnosisLabel, PatientRecord, N_CLASSES};

/// Accuracy plus unweighted class-mean recall and F1. `confusion[t][p]`
/// counts records of true class `t` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub accuracy: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
}

impl ModelMetrics {
    pub fn from_confusion(confusion: [[usize; N_CLASSES]; N_CLASSES]) -> Result<Self, ModelError> {
        let total: usize = confusion.iter().flatten().sum();
        if total == 0 {
            return Err(ModelError::EmptyEvaluation);
        }
        let trace: usize = (0..N_CLASSES).map(|k| confusion[k][k]).sum();
        let mut recall_sum = 0.0;
        let mut f1_sum = 0.0;
        for k in 0..N_CLASSES {
            let tp = confusion[k][k] as f64;
            let actual: usize = confusion[k].iter().sum();
            let predicted: usize = confusion.iter().map(|row| row[k]).sum();
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            let precision = if predicted == 0 {
                0.0
            } else {
                tp / predicted as f64
            };
            recall_sum += recall;
            if precision + recall > 0.0 {
                f1_sum += 2.0 * precision * recall / (precision + recall);
            }
        }
        Ok(Self {
            accuracy: trace as f64 / total as f64,
            macro_recall: recall_sum / N_CLASSES as f64,
            macro_f1: f1_sum / N_CLASSES as f64,
            confusion,
        })
    }
}

pub fn evaluate_predictions(
    predictions: &[ClassDistribution],
    labels: &[DiagnosisLabel],
) -> Result<ModelMetrics, ModelError> {
    if predictions.len() != labels.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = [[0usize; N_CLASSES]; N_CLASSES];
    for (p, l) in predictions.iter().zip(labels) {
        confusion[l.code()][p.argmax().code()] += 1;
    }
    ModelMetrics::from_confusion(confusion)
}

/// Scores `predict` on labeled records.
pub fn evaluate<F>(predict: F, records: &[&PatientRecord]) -> Result<ModelMetrics, ModelError>
where
    F: Fn(&PatientRecord) -> Result<ClassDistribution, ModelError>,
{
    if records.is_empty() {
        return Err(ModelError::EmptyEvaluation);
    }
    let labels = super::labels_of(records)?;
    let preds = records
        .iter()
        .map(|r| predict(r))
        .collect::<Result<Vec<_>, _>>()?;
    evaluate_predictions(&preds, &labels)
}
