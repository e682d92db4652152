//! Per-patient attributions: Shapley values for indicators, Grad-CAM for
//! scans and linear token contributions for notes.

mod saliency;
mod shapley;
mod tokens;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{DiagnosisLabel, Modality, ModalityMask, PatientRecord};
use crate::models::{ModelError, ModelSet};

pub use saliency::{bilinear_upsample, grad_cam, SaliencyMap, SaliencyMode};
pub use shapley::{
    exact_shapley, sample_background, sampled_shapley, ShapleyAttribution, MAX_EXACT_FEATURES,
    MIN_SAMPLES,
};
pub use tokens::{token_attribution, TokenAttribution, TokenWeight};

#[derive(Debug, Error)]
pub enum ExplainError {
    #[error("exact Shapley enumeration supports at most {MAX_EXACT_FEATURES} features, got {0}; use sampled_shapley")]
    TooManyFeatures(usize),
    #[error("Shapley background is empty")]
    EmptyBackground,
    #[error("sampled Shapley needs at least {MIN_SAMPLES} samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{modality} attribution: {source}")]
    Modality {
        modality: Modality,
        #[source]
        source: Box<ExplainError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ExplainError {
    fn within(self, modality: Modality) -> Self {
        ExplainError::Modality {
            modality,
            source: Box::new(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainConfig {
    pub shapley_samples: usize,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            shapley_samples: 2000,
            seed: 0,
        }
    }
}

/// Attributions for one patient and class; a slot is `None` when the
/// modality is absent from the record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionBundle {
    pub card_id: String,
    pub target_class: DiagnosisLabel,
    pub mask: ModalityMask,
    pub indicator: Option<ShapleyAttribution>,
    pub text: Option<TokenAttribution>,
    pub image: Option<SaliencyMap>,
}

/// `background` holds raw feature rows (see [`sample_background`]).
pub fn explain_patient(
    models: &ModelSet,
    background: &[Vec<f64>],
    record: &PatientRecord,
    target: DiagnosisLabel,
    config: &ExplainConfig,
) -> Result<AttributionBundle, ExplainError> {
    let indicator = match &record.indicators {
        Some(v) => {
            let predict = |z: &[f64]| {
                models
                    .indicator
                    .predict_features(z)
                    .map(|d| d.probs())
                    .expect("feature width checked against the background")
            };
            let x = v.features();
            if x.len() != models.indicator.n_features() {
                return Err(ExplainError::DimensionMismatch(format!(
                    "record has {} features, model expects {}",
                    x.len(),
                    models.indicator.n_features()
                ))
                .within(Modality::Indicator));
            }
            Some(
                sampled_shapley(
                    predict,
                    &x,
                    background,
                    target,
                    config.shapley_samples,
                    config.seed,
                )
                .map_err(|e| e.within(Modality::Indicator))?,
            )
        }
        None => None,
    };
    let text = record
        .note
        .as_ref()
        .map(|n| token_attribution(&models.text, n, target));
    let image = match &record.image {
        Some(im) => Some(
            grad_cam(&models.image, im, target, SaliencyMode::GuidedGradCam)
                .map_err(|e| e.within(Modality::Image))?,
        ),
        None => None,
    };
    Ok(AttributionBundle {
        card_id: record.card_id.clone(),
        target_class: target,
        mask: record.mask(),
        indicator,
        text,
        image,
    })
}
