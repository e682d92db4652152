//! Per-modality classifiers: gradient-boosted trees over indicators, a summed
//! token-embedding linear model over notes and a small CNN over scans.

mod boost;
mod cnn;
mod grid;
mod metrics;
mod optim;
mod text;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::artifact::{ArtifactError, Container};
use crate::cohort::{CohortError, DiagnosisLabel, Modality, PatientRecord, N_CLASSES};

pub use boost::{train_indicator_model, BoostParams, IndicatorModel, Standardizer, TrainingTrace};
pub use cnn::{
    train_image_model, ConvNetShape, ForwardCache, ImageGradients, ImageModel, ImageParams,
    ReluMode,
};
pub use grid::{
    grid_search, BoostGrid, GridReport, GridRow, HyperparamGrid, Hyperparams, ImageGrid, TextGrid,
};
pub use metrics::{evaluate, evaluate_predictions, ModelMetrics};
pub use text::{train_text_model, TextGradients, TextModel, TextParams, Vocabulary};

/// Tolerance on the sum of a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training set must contain at least 2 classes, found {0}")]
    SingleClass(usize),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("evaluation set is empty")]
    EmptyEvaluation,
    #[error("vocabulary is empty: no token occurs at least {min_count} times")]
    EmptyVocabulary { min_count: usize },
    #[error("vocabulary covers {covered} of {total} documents, at least 90% required")]
    LowVocabularyCoverage { covered: usize, total: usize },
    #[error("training diverged at epoch {epoch} (last finite epoch: {last_finite_epoch:?})")]
    Diverged {
        epoch: usize,
        last_finite_epoch: Option<usize>,
    },
    #[error("input shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("record {card_id} has no {modality} data")]
    MissingModality { card_id: String, modality: Modality },
    #[error("not a probability vector: {0:?}")]
    InvalidDistribution([f64; N_CLASSES]),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("grid point {point}: {source}")]
    GridPoint {
        point: String,
        #[source]
        source: Box<ModelError>,
    },
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
}

/// Probability vector over the diagnostic classes, indexed by class code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; N_CLASSES]", into = "[f64; N_CLASSES]")]
pub struct ClassDistribution([f64; N_CLASSES]);

impl ClassDistribution {
    pub fn new(p: [f64; N_CLASSES]) -> Result<Self, ModelError> {
        let ok = p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && (p.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL;
        if ok {
            Ok(Self(p))
        } else {
            Err(ModelError::InvalidDistribution(p))
        }
    }

    pub fn uniform() -> Self {
        Self([1.0 / N_CLASSES as f64; N_CLASSES])
    }

    pub fn one_hot(label: DiagnosisLabel) -> Self {
        let mut p = [0.0; N_CLASSES];
        p[label.code()] = 1.0;
        Self(p)
    }

    pub fn from_logits(logits: &[f64; N_CLASSES]) -> Self {
        Self(softmax(logits))
    }

    pub fn probs(&self) -> [f64; N_CLASSES] {
        self.0
    }

    pub fn prob(&self, label: DiagnosisLabel) -> f64 {
        self.0[label.code()]
    }

    /// Most probable class; ties go to the lowest class code.
    pub fn argmax(&self) -> DiagnosisLabel {
        DiagnosisLabel::ALL[argmax(&self.0)]
    }
}

impl TryFrom<[f64; N_CLASSES]> for ClassDistribution {
    type Error = ModelError;

    fn try_from(p: [f64; N_CLASSES]) -> Result<Self, ModelError> {
        Self::new(p)
    }
}

impl From<ClassDistribution> for [f64; N_CLASSES] {
    fn from(d: ClassDistribution) -> Self {
        d.0
    }
}

pub(crate) fn softmax(z: &[f64; N_CLASSES]) -> [f64; N_CLASSES] {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e = z.map(|v| (v - m).exp());
    let s: f64 = e.iter().sum();
    e.map(|v| v / s)
}

/// Index of the largest value, first one on ties.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Natural-log class frequencies, used as the starting bias of every model so
/// an uninformative input predicts the training priors.
pub(crate) fn log_priors(labels: &[DiagnosisLabel]) -> Result<[f64; N_CLASSES], ModelError> {
    if labels.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let mut counts = [0usize; N_CLASSES];
    for l in labels {
        counts[l.code()] += 1;
    }
    let present = counts.iter().filter(|&&c| c > 0).count();
    if present < 2 {
        return Err(ModelError::SingleClass(present));
    }
    // absent classes get a large negative, not -inf, so softmax stays finite
    Ok(counts.map(|c| {
        if c == 0 {
            -30.0
        } else {
            (c as f64 / labels.len() as f64).ln()
        }
    }))
}

/// Labels of `records`, failing on the first unlabeled one.
pub fn labels_of(records: &[&PatientRecord]) -> Result<Vec<DiagnosisLabel>, ModelError> {
    records
        .iter()
        .map(|r| r.require_label().map_err(ModelError::from))
        .collect()
}

pub(crate) fn missing(record: &PatientRecord, modality: Modality) -> ModelError {
    ModelError::MissingModality {
        card_id: record.card_id.clone(),
        modality,
    }
}

/// Stratified holdout used for early stopping. Returns `(fit, holdout)`; each
/// class with at least two members contributes about `fraction` of them to
/// the holdout.
pub fn holdout_split<'a>(
    records: &[&'a PatientRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a PatientRecord>, Vec<&'a PatientRecord>), ModelError> {
    let mut by_class: [Vec<&PatientRecord>; N_CLASSES] = Default::default();
    for r in records {
        by_class[r.require_label()?.code()].push(r);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut fit, mut hold) = (Vec::new(), Vec::new());
    for members in by_class.iter_mut() {
        members.shuffle(&mut rng);
        let n_hold = if members.len() < 2 {
            0
        } else {
            ((fraction * members.len() as f64).round() as usize).clamp(1, members.len() - 1)
        };
        hold.extend_from_slice(&members[..n_hold]);
        fit.extend_from_slice(&members[n_hold..]);
    }
    let order = |v: &mut Vec<&PatientRecord>| v.sort_by(|a, b| a.card_id.cmp(&b.card_id));
    order(&mut fit);
    order(&mut hold);
    Ok((fit, hold))
}

/// The three trained per-modality models.
#[derive(Debug, Clone)]
pub struct ModelSet {
    pub indicator: IndicatorModel,
    pub text: TextModel,
    pub image: ImageModel,
}

pub const INDICATOR_ARTIFACT: &str = "indicator.damdl";
pub const TEXT_ARTIFACT: &str = "text.damdl";
pub const IMAGE_ARTIFACT: &str = "image.damdl";

impl ModelSet {
    /// Per-modality predictions, `None` where the record lacks that modality.
    pub fn predict_record(
        &self,
        record: &PatientRecord,
    ) -> Result<[Option<ClassDistribution>; 3], ModelError> {
        Ok([
            record
                .indicators
                .as_ref()
                .map(|x| self.indicator.predict_proba(x))
                .transpose()?,
            record.note.as_ref().map(|n| self.text.predict_proba(n)),
            record
                .image
                .as_ref()
                .map(|im| self.image.predict_proba(im))
                .transpose()?,
        ])
    }

    pub fn save(&self, dir: &Path) -> Result<(), ModelError> {
        self.indicator
            .to_container()
            .save(dir.join(INDICATOR_ARTIFACT))?;
        self.text.to_container().save(dir.join(TEXT_ARTIFACT))?;
        self.image.to_container().save(dir.join(IMAGE_ARTIFACT))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, ModelError> {
        Ok(Self {
            indicator: IndicatorModel::from_container(&Container::load(
                dir.join(INDICATOR_ARTIFACT),
            )?)?,
            text: TextModel::from_container(&Container::load(dir.join(TEXT_ARTIFACT))?)?,
            image: ImageModel::from_container(&Container::load(dir.join(IMAGE_ARTIFACT))?)?,
        })
    }
}
