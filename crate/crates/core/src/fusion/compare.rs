//! Decision-level vs feature-level fusion on a shared validation split.

use serde::{Deserialize, Serialize};

use crate::cohort::{Modality, PatientRecord};
use crate::embed::extract_embeddings;
use crate::models::{
    evaluate_predictions, labels_of, ClassDistribution, ModelError, ModelMetrics, ModelSet,
};

use super::{
    fuse, train_feature_level_baseline, BaselineConfig, FusionError, LearnedWeights,
    ModalityWeights,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnimodalMetrics {
    pub indicator: ModelMetrics,
    pub text: ModelMetrics,
    pub image: ModelMetrics,
}

impl UnimodalMetrics {
    pub fn get(&self, m: Modality) -> &ModelMetrics {
        match m {
            Modality::Indicator => &self.indicator,
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionComparisonReport {
    pub weights: ModalityWeights,
    pub loss_trace: Vec<f64>,
    pub unimodal: UnimodalMetrics,
    pub decision_level: ModelMetrics,
    pub feature_level: ModelMetrics,
    /// The validation patients both strategies were scored on.
    pub val_card_ids: Vec<String>,
}

/// Scores each modality alone (on the records that have it) and the
/// weighted-vote fusion on `val`.
pub fn evaluate_decision_level(
    models: &ModelSet,
    weights: &ModalityWeights,
    val: &[&PatientRecord],
) -> Result<(UnimodalMetrics, ModelMetrics), FusionError> {
    if val.is_empty() {
        return Err(ModelError::EmptyEvaluation.into());
    }
    let labels = labels_of(val)?;
    let mut per_modality: [Vec<ClassDistribution>; 3] = Default::default();
    let mut per_modality_labels: [Vec<_>; 3] = Default::default();
    let mut decision = Vec::with_capacity(val.len());
    for (r, l) in val.iter().zip(&labels) {
        let preds = models.predict_record(r)?;
        for m in 0..3 {
            if let Some(p) = preds[m] {
                per_modality[m].push(p);
                per_modality_labels[m].push(*l);
            }
        }
        decision.push(fuse(&preds, weights)?.fused);
    }
    let [ind, txt, img] =
        [0, 1, 2].map(|m| evaluate_predictions(&per_modality[m], &per_modality_labels[m]));
    let unimodal = UnimodalMetrics {
        indicator: ind?,
        text: txt?,
        image: img?,
    };
    Ok((unimodal, evaluate_predictions(&decision, &labels)?))
}

/// Fits the feature-level baseline on the embeddings of `train` and scores
/// it on `val`.
pub fn evaluate_feature_level(
    models: &ModelSet,
    weights: &ModalityWeights,
    train: &[&PatientRecord],
    val: &[&PatientRecord],
    baseline: &BaselineConfig,
) -> Result<ModelMetrics, FusionError> {
    if val.is_empty() {
        return Err(ModelError::EmptyEvaluation.into());
    }
    let train_emb = extract_embeddings(models, weights, train)?;
    let rows: Vec<Vec<f64>> = train_emb.rows.iter().map(|r| r.concatenated()).collect();
    let classifier = train_feature_level_baseline(&rows, &labels_of(train)?, baseline)?;
    let val_emb = extract_embeddings(models, weights, val)?;
    let feature = val_emb
        .rows
        .iter()
        .map(|r| classifier.predict(&r.concatenated()))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(evaluate_predictions(&feature, &labels_of(val)?)?)
}

/// Both strategies on the same `val`; the baseline is fit on `train`.
pub fn compare_fusion_strategies(
    models: &ModelSet,
    learned: &LearnedWeights,
    train: &[&PatientRecord],
    val: &[&PatientRecord],
    baseline: &BaselineConfig,
) -> Result<FusionComparisonReport, FusionError> {
    let (unimodal, decision_level) = evaluate_decision_level(models, &learned.weights, val)?;
    let feature_level = evaluate_feature_level(models, &learned.weights, train, val, baseline)?;
    Ok(FusionComparisonReport {
        weights: learned.weights,
        loss_trace: learned.loss_trace.clone(),
        unimodal,
        decision_level,
        feature_level,
        val_card_ids: val.iter().map(|r| r.card_id.clone()).collect(),
    })
}
