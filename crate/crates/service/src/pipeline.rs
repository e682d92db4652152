//! Batch steps behind the CLI subcommands. Each step reads the artifacts of
//! the previous ones and writes its own; re-running a step with the same
//! config rewrites identical files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use diag_core::cohort::{
    generate_synthetic_cohort, read_cohort_dir, write_cohort, CohortDataset, CohortError,
    DiagnosisLabel, Manifest, PatientRecord, Subset, MANIFEST_FILE,
};
use diag_core::embed::{extract_embeddings, project_all, EmbedError, ProjectionSet};
use diag_core::explain::{
    explain_patient, sample_background, AttributionBundle, ExplainConfig, ExplainError,
};
use diag_core::fusion::{
    evaluate_decision_level, evaluate_feature_level, fuse, learn_weights, FusionComparisonReport,
    FusionError, LearnedWeights, ModalityWeights, UnimodalMetrics,
};
use diag_core::models::{
    grid_search, train_image_model, train_indicator_model, train_text_model, BoostParams,
    ClassDistribution, GridReport, HyperparamGrid, Hyperparams, ImageParams, ModelError,
    ModelMetrics, ModelSet, TextParams, IMAGE_ARTIFACT, INDICATOR_ARTIFACT, TEXT_ARTIFACT,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{Config, ConfigError};

pub const WEIGHTS_FILE: &str = "weights.json";
pub const TRAINING_FILE: &str = "training.json";
pub const EVALUATION_FILE: &str = "evaluation.json";
pub const FUSION_REPORT_FILE: &str = "fusion-report.json";
pub const PROJECTIONS_FILE: &str = "projections.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("missing {path}; run `diag-assistant {step}` first")]
    MissingArtifact { path: String, step: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("unknown card_id {0:?}")]
    UnknownPatient(String),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Explain(#[from] ExplainError),
    #[error(transparent)]
    Store(#[from] crate::store::StoreError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingArtifact { .. } => 3,
            _ => 1,
        }
    }

    fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// Learned fusion weights plus the patients they were fit on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsArtifact {
    pub learned: LearnedWeights,
    pub fit_card_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub indicator: BoostParams,
    pub text: TextParams,
    pub image: ImageParams,
    pub grid: Vec<GridReport>,
    pub n_train: usize,
    pub n_val: usize,
    pub weights: ModalityWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMode {
    Decision,
    Feature,
    Both,
}

impl FusionMode {
    fn decision(self) -> bool {
        self != FusionMode::Feature
    }

    fn feature(self) -> bool {
        self != FusionMode::Decision
    }
}

impl FromStr for FusionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "decision" => Ok(FusionMode::Decision),
            "feature" => Ok(FusionMode::Feature),
            "both" => Ok(FusionMode::Both),
            _ => Err(format!(
                "unknown fusion mode {s:?} (decision, feature or both)"
            )),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Decision => "decision",
            FusionMode::Feature => "feature",
            FusionMode::Both => "both",
        })
    }
}

/// Validation-split metrics. Fusion blocks are present according to the
/// mode `evaluate` ran with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub fusion: FusionMode,
    pub weights: ModalityWeights,
    pub unimodal: UnimodalMetrics,
    pub decision_level: Option<ModelMetrics>,
    pub feature_level: Option<ModelMetrics>,
    pub val_card_ids: Vec<String>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| PipelineError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| PipelineError::io(path, e))
}

/// Reads a JSON artifact, reporting `step` as the producer when it is absent.
pub fn read_json<T: DeserializeOwned>(path: &Path, step: &'static str) -> Result<T, PipelineError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(PipelineError::MissingArtifact {
                path: path.display().to_string(),
                step,
            })
        }
        Err(e) => return Err(PipelineError::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| PipelineError::Corrupt {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

impl Config {
    pub fn artifact(&self, name: &str) -> PathBuf {
        self.artifact_dir.join(name)
    }

    pub fn explain_config(&self) -> ExplainConfig {
        ExplainConfig {
            shapley_samples: self.explain.shapley_samples,
            seed: self.explain.seed,
        }
    }
}

pub fn generate_data(cfg: &Config) -> Result<CohortDataset, PipelineError> {
    let (dataset, truth) = generate_synthetic_cohort(&cfg.synthetic)?;
    write_cohort(&dataset, &truth, &cfg.data_dir)?;
    Ok(dataset)
}

pub fn load_dataset(cfg: &Config) -> Result<(CohortDataset, Manifest), PipelineError> {
    let manifest = cfg.data_dir.join(MANIFEST_FILE);
    if !manifest.is_file() {
        return Err(PipelineError::MissingArtifact {
            path: manifest.display().to_string(),
            step: "generate-data",
        });
    }
    Ok(read_cohort_dir(&cfg.data_dir)?)
}

fn full_predictions(
    models: &ModelSet,
    records: &[&PatientRecord],
) -> Result<Vec<[ClassDistribution; 3]>, ModelError> {
    records
        .iter()
        .map(|r| {
            let [a, b, c] = models.predict_record(r)?;
            Ok([
                a.expect("complete record"),
                b.expect("complete record"),
                c.expect("complete record"),
            ])
        })
        .collect()
}

/// Trains the three models on the training split, then learns fusion
/// weights from their validation predictions.
pub fn train(cfg: &Config) -> Result<TrainingReport, PipelineError> {
    let (dataset, _) = load_dataset(cfg)?;
    let train = dataset.subset(Subset::Train);
    let val = dataset.subset(Subset::Val);
    let t = &cfg.training;
    let (mut indicator, mut text, mut image) =
        (t.indicator.clone(), t.text.clone(), t.image.clone());
    let mut grid_reports = Vec::new();
    if let Some(g) = &t.grid {
        let grids = [
            g.indicator.clone().map(HyperparamGrid::Indicator),
            g.text.clone().map(HyperparamGrid::Text),
            g.image.clone().map(HyperparamGrid::Image),
        ];
        for grid in grids.into_iter().flatten() {
            let (best, report) = grid_search(&grid, &train, g.k, g.seed)?;
            match best {
                Hyperparams::Indicator(p) => indicator = p,
                Hyperparams::Text(p) => text = p,
                Hyperparams::Image(p) => image = p,
            }
            grid_reports.push(report);
        }
    }
    let models = ModelSet {
        indicator: train_indicator_model(&train, &indicator)?,
        text: train_text_model(&train, &text)?,
        image: train_image_model(&train, &image)?,
    };

    let complete: Vec<&PatientRecord> = val
        .iter()
        .copied()
        .filter(|r| r.mask().present_count() == 3)
        .collect();
    let preds = full_predictions(&models, &complete)?;
    let labels = diag_core::models::labels_of(&complete)?;
    let learned = learn_weights(&preds, &labels, &t.weights)?;

    fs::create_dir_all(&cfg.artifact_dir).map_err(|e| PipelineError::io(&cfg.artifact_dir, e))?;
    models.save(&cfg.artifact_dir)?;
    write_json(
        &cfg.artifact(WEIGHTS_FILE),
        &WeightsArtifact {
            learned: learned.clone(),
            fit_card_ids: complete.iter().map(|r| r.card_id.clone()).collect(),
        },
    )?;
    let report = TrainingReport {
        indicator,
        text,
        image,
        grid: grid_reports,
        n_train: train.len(),
        n_val: val.len(),
        weights: learned.weights,
    };
    write_json(&cfg.artifact(TRAINING_FILE), &report)?;
    Ok(report)
}

pub fn load_models(cfg: &Config) -> Result<(ModelSet, WeightsArtifact), PipelineError> {
    for name in [
        INDICATOR_ARTIFACT,
        TEXT_ARTIFACT,
        IMAGE_ARTIFACT,
        WEIGHTS_FILE,
    ] {
        let path = cfg.artifact(name);
        if !path.is_file() {
            return Err(PipelineError::MissingArtifact {
                path: path.display().to_string(),
                step: "train",
            });
        }
    }
    let weights = read_json(&cfg.artifact(WEIGHTS_FILE), "train")?;
    Ok((ModelSet::load(&cfg.artifact_dir)?, weights))
}

pub fn evaluate(cfg: &Config, mode: FusionMode) -> Result<EvaluationReport, PipelineError> {
    let (dataset, _) = load_dataset(cfg)?;
    let (models, weights) = load_models(cfg)?;
    let w = weights.learned.weights;
    let train = dataset.subset(Subset::Train);
    let val = dataset.subset(Subset::Val);
    let (unimodal, decision) = evaluate_decision_level(&models, &w, &val)?;
    let feature = if mode.feature() {
        Some(evaluate_feature_level(
            &models,
            &w,
            &train,
            &val,
            &cfg.training.baseline,
        )?)
    } else {
        None
    };
    let report = EvaluationReport {
        fusion: mode,
        weights: w,
        unimodal,
        decision_level: mode.decision().then_some(decision),
        feature_level: feature,
        val_card_ids: val.iter().map(|r| r.card_id.clone()).collect(),
    };
    write_json(&cfg.artifact(EVALUATION_FILE), &report)?;
    if let (Some(decision_level), Some(feature_level)) =
        (&report.decision_level, &report.feature_level)
    {
        let comparison = FusionComparisonReport {
            weights: w,
            loss_trace: weights.learned.loss_trace.clone(),
            unimodal: report.unimodal.clone(),
            decision_level: decision_level.clone(),
            feature_level: feature_level.clone(),
            val_card_ids: report.val_card_ids.clone(),
        };
        write_json(&cfg.artifact(FUSION_REPORT_FILE), &comparison)?;
    }
    Ok(report)
}

/// t-SNE of every patient in the four embedding spaces.
pub fn project(cfg: &Config) -> Result<ProjectionSet, PipelineError> {
    let (dataset, _) = load_dataset(cfg)?;
    let (models, weights) = load_models(cfg)?;
    let records: Vec<&PatientRecord> = dataset.records().iter().collect();
    let embeddings = extract_embeddings(&models, &weights.learned.weights, &records)?;
    let projections = project_all(&embeddings, &cfg.tsne)?;
    write_json(&cfg.artifact(PROJECTIONS_FILE), &projections)?;
    Ok(projections)
}

/// Shapley background: a seeded sample of training-split feature rows.
pub fn shapley_background(cfg: &Config, dataset: &CohortDataset) -> Vec<Vec<f64>> {
    let rows: Vec<Vec<f64>> = dataset
        .subset(Subset::Train)
        .iter()
        .filter_map(|r| r.indicators.as_ref().map(|v| v.features()))
        .collect();
    sample_background(&rows, cfg.explain.background_rows, cfg.explain.seed)
}

/// The class a patient's attributions default to: the fused prediction.
pub fn predicted_class(
    models: &ModelSet,
    weights: &ModalityWeights,
    record: &PatientRecord,
) -> Result<DiagnosisLabel, PipelineError> {
    Ok(fuse(&models.predict_record(record)?, weights)?
        .fused
        .argmax())
}

pub fn explain(
    cfg: &Config,
    card_id: &str,
    class: Option<DiagnosisLabel>,
) -> Result<AttributionBundle, PipelineError> {
    let (dataset, _) = load_dataset(cfg)?;
    let (models, weights) = load_models(cfg)?;
    let record = dataset
        .get(card_id)
        .ok_or_else(|| PipelineError::UnknownPatient(card_id.to_string()))?;
    let target = match class {
        Some(c) => c,
        None => predicted_class(&models, &weights.learned.weights, record)?,
    };
    let background = shapley_background(cfg, &dataset);
    Ok(explain_patient(
        &models,
        &background,
        record,
        target,
        &cfg.explain_config(),
    )?)
}

/// Hex SHA-256 over everything an attribution depends on: the model and
/// weight artifacts, the cohort manifest and the explain settings.
pub fn artifact_digest(cfg: &Config) -> Result<String, PipelineError> {
    let mut h = Sha256::new();
    let files = [
        cfg.artifact(INDICATOR_ARTIFACT),
        cfg.artifact(TEXT_ARTIFACT),
        cfg.artifact(IMAGE_ARTIFACT),
        cfg.artifact(WEIGHTS_FILE),
        cfg.data_dir.join(MANIFEST_FILE),
    ];
    for path in &files {
        let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    h.update(serde_json::to_vec(&cfg.explain).expect("settings serialize"));
    Ok(hex(&h.finalize()))
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
