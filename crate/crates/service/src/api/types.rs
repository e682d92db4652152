//! Request and response bodies of the JSON API.

use diag_core::cohort::{CohortSummary, DiagnosisLabel, ModalityMask, Provenance, Subset};
use diag_core::embed::EmbeddingSpace;
use diag_core::explain::TokenWeight;
use diag_core::fusion::{FusedPrediction, ModalityWeights, UnimodalMetrics};
use diag_core::models::ModelMetrics;
use serde::{Deserialize, Serialize};

use crate::store::Selection;

pub const TASK_DESCRIPTION: &str =
    "Three-class lumbar disc diagnosis (normal, herniated, bulging) from laboratory indicators, \
     clinical notes and spine scans, combined by weighted decision-level fusion.";

pub const ANONYMOUS: &str = "anonymous";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
}

/// The three modalities' values of some quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerModality<T> {
    pub indicator: T,
    pub text: T,
    pub image: T,
}

impl<T> PerModality<T> {
    pub fn from_array([indicator, text, image]: [T; 3]) -> Self {
        Self {
            indicator,
            text,
            image,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryResponse {
    pub task: String,
    pub cohort: CohortSummary,
    pub provenance: Provenance,
    pub modality_metrics: UnimodalMetrics,
    pub fusion_metrics: ModelMetrics,
    /// Present when `evaluate` also scored the feature-level baseline.
    pub feature_level_metrics: Option<ModelMetrics>,
    pub weights: ModalityWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionRequest {
    pub space: EmbeddingSpace,
    #[serde(default)]
    pub card_ids: Option<Vec<String>>,
    /// Lasso vertices in the space's projection coordinates.
    #[serde(default)]
    pub polygon: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub actor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSummary {
    pub name: String,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// One value per member with indicators, in member order.
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenMean {
    pub token: String,
    pub mean_weight: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThumbnailGroup {
    pub predicted_class: DiagnosisLabel,
    pub card_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionAnalytics {
    pub size: usize,
    /// Counts per class code.
    pub predicted_class_counts: [usize; 3],
    pub true_class_counts: [usize; 3],
    /// Mean of each modality's distribution over the members that have it.
    pub modality_mean: PerModality<Option<[f64; 3]>>,
    /// Mean over members of `w'_m * P_m(c)`, the modality's slice of the
    /// fused probability; absent modalities contribute zero. Summed over
    /// modalities this is `fused_mean`.
    pub contribution_pmf: PerModality<[f64; 3]>,
    pub fused_mean: [f64; 3],
    pub indicators: Vec<IndicatorSummary>,
    /// Token weights toward each member's predicted class, averaged over
    /// occurrences, descending.
    pub token_weights: Vec<TokenMean>,
    /// Members with a scan, grouped by predicted class (all three classes,
    /// possibly empty).
    pub thumbnails: Vec<ThumbnailGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResponse {
    pub selection: Selection,
    pub analytics: SelectionAnalytics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureAttribution {
    pub name: String,
    pub value: f64,
    pub phi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorDetail {
    pub base_value: f64,
    /// Indicator-model probability of the target class.
    pub prediction: f64,
    pub features: Vec<FeatureAttribution>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextDetail {
    pub raw_text: String,
    pub tokens: Vec<TokenWeight>,
    pub bias: f64,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageLinks {
    pub raw: String,
    pub cam: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientDetail {
    pub card_id: String,
    pub label: Option<DiagnosisLabel>,
    pub subset: Option<Subset>,
    pub predicted_class: DiagnosisLabel,
    /// Class the attributions explain.
    pub target_class: DiagnosisLabel,
    pub mask: ModalityMask,
    pub indicators: Option<IndicatorDetail>,
    pub text: Option<TextDetail>,
    pub image: Option<ImageLinks>,
    pub prediction: FusedPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareRequest {
    pub card_a: String,
    pub card_b: String,
    #[serde(default)]
    pub actor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientKeyInfo {
    pub card_id: String,
    pub label: Option<DiagnosisLabel>,
    pub predicted_class: DiagnosisLabel,
    /// Feature with the highest phi toward the predicted class.
    pub top_feature: Option<FeatureAttribution>,
    pub top_tokens: Vec<TokenWeight>,
    pub image: Option<ImageLinks>,
    pub prediction: FusedPrediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRecord {
    pub card_ids: [String; 2],
    pub patients: [PatientKeyInfo; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoteRequest {
    #[serde(default)]
    pub author: Option<String>,
    #[serde(default)]
    pub card_ids: Vec<String>,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientQuery {
    pub class: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotesQuery {
    pub card_id: Option<String>,
}
