//! HTTP routes. Models, projections and reports are immutable shared state;
//! the only writes go through [`Stores`].

mod analytics;
pub mod types;

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use diag_core::cohort::{
    cohort_summary, feature_names, CohortDataset, CohortSummary, DiagnosisLabel, PatientRecord,
    IMAGE_SIDE,
};
use diag_core::embed::ProjectionSet;
use diag_core::explain::{
    explain_patient, AttributionBundle, ExplainConfig, ShapleyAttribution, TokenWeight,
};
use diag_core::fusion::{fuse, FusedPrediction, ModalityWeights};
use diag_core::imageio::encode_gray_png;
use diag_core::models::ModelSet;
use serde::de::DeserializeOwned;

use crate::cache::AttributionCache;
use crate::config::Config;
use crate::geometry::point_in_polygon;
use crate::pipeline::{
    artifact_digest, load_dataset, load_models, read_json, shapley_background, EvaluationReport,
    PipelineError, EVALUATION_FILE, PROJECTIONS_FILE,
};
use crate::store::{Action, ActionKind, ActionLogEntry, LearningNote, StoreError, Stores};

pub use analytics::selection_analytics;
use types::*;

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl ToString) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, message.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(ErrorBody {
                error: self.message,
            }),
        )
            .into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        ApiError::bad_request(r.body_text())
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        ApiError::internal(e)
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// A report produced by a batch step, read on first use so the service
/// picks it up once the step has run.
struct LazyArtifact<T> {
    path: PathBuf,
    step: &'static str,
    value: RwLock<Option<Arc<T>>>,
}

impl<T: DeserializeOwned> LazyArtifact<T> {
    fn new(path: PathBuf, step: &'static str) -> Self {
        Self {
            path,
            step,
            value: RwLock::new(None),
        }
    }

    fn get(&self) -> ApiResult<Arc<T>> {
        if let Some(v) = self.value.read().expect("artifact lock").as_ref() {
            return Ok(v.clone());
        }
        match read_json::<T>(&self.path, self.step) {
            Ok(v) => {
                let v = Arc::new(v);
                *self.value.write().expect("artifact lock") = Some(v.clone());
                Ok(v)
            }
            Err(e @ PipelineError::MissingArtifact { .. }) => Err(ApiError::new(
                StatusCode::SERVICE_UNAVAILABLE,
                e.to_string(),
            )),
            Err(e) => Err(ApiError::internal(e)),
        }
    }
}

pub struct AppState {
    pub dataset: CohortDataset,
    pub models: ModelSet,
    pub weights: ModalityWeights,
    /// Fused prediction per record, aligned with `dataset.records()`.
    pub predictions: Vec<FusedPrediction>,
    pub background: Vec<Vec<f64>>,
    pub explain: ExplainConfig,
    pub summary: CohortSummary,
    evaluation: LazyArtifact<EvaluationReport>,
    projections: LazyArtifact<ProjectionSet>,
    cache: AttributionCache,
    pub stores: Stores,
}

impl AppState {
    /// Loads the cohort and the trained artifacts named by `cfg` and opens
    /// the stores. Fails when `generate-data` or `train` has not run.
    pub fn load(cfg: &Config) -> Result<Self, PipelineError> {
        let (models, weights) = load_models(cfg)?;
        let (dataset, _) = load_dataset(cfg)?;
        let weights = weights.learned.weights;
        let predictions = dataset
            .records()
            .iter()
            .map(|r| Ok(fuse(&models.predict_record(r)?, &weights)?))
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let digest = artifact_digest(cfg)?;
        Ok(Self {
            background: shapley_background(cfg, &dataset),
            summary: cohort_summary(&dataset)?,
            dataset,
            models,
            weights,
            predictions,
            explain: cfg.explain_config(),
            evaluation: LazyArtifact::new(cfg.artifact(EVALUATION_FILE), "evaluate"),
            projections: LazyArtifact::new(cfg.artifact(PROJECTIONS_FILE), "project"),
            cache: AttributionCache::new(cfg.state_dir.join("cache"), &digest),
            stores: Stores::open(&cfg.state_dir)?,
        })
    }

    fn position(&self, card_id: &str) -> ApiResult<usize> {
        self.dataset
            .position(card_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown card_id {card_id:?}")))
    }

    fn record(&self, i: usize) -> &PatientRecord {
        &self.dataset.records()[i]
    }
}

/// Attributions for record `i` toward `class`, from the cache or computed.
async fn bundle(
    state: &Arc<AppState>,
    i: usize,
    class: DiagnosisLabel,
) -> ApiResult<Arc<AttributionBundle>> {
    let s = state.clone();
    let card_id = state.record(i).card_id.clone();
    state
        .cache
        .get_or_compute(&card_id, class, move || {
            explain_patient(&s.models, &s.background, s.record(i), class, &s.explain)
        })
        .await
        .map_err(ApiError::internal)
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/summary", get(summary))
        .route("/api/projections", get(projections))
        .route("/api/selection", post(selection))
        .route("/api/patient/{card_id}", get(patient))
        .route("/api/compare", post(compare))
        .route("/api/notes", post(add_note).get(list_notes))
        .route("/api/actions", get(actions))
        .route("/api/image/{card_id}/{kind}", get(image))
        .fallback(|| async { ApiError::not_found("no such route") })
        .with_state(state)
}

async fn summary(State(s): State<Arc<AppState>>) -> ApiResult<Json<SummaryResponse>> {
    let eval = s.evaluation.get()?;
    let fusion_metrics = eval.decision_level.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "evaluation has no decision-level block; run `diag-assistant evaluate --fusion both`",
        )
    })?;
    Ok(Json(SummaryResponse {
        task: TASK_DESCRIPTION.to_string(),
        cohort: s.summary.clone(),
        provenance: s.dataset.provenance().clone(),
        modality_metrics: eval.unimodal.clone(),
        fusion_metrics,
        feature_level_metrics: eval.feature_level.clone(),
        weights: eval.weights,
    }))
}

async fn projections(State(s): State<Arc<AppState>>) -> ApiResult<Json<ProjectionSet>> {
    Ok(Json(s.projections.get()?.as_ref().clone()))
}

fn resolve_members(s: &AppState, req: &SelectionRequest) -> ApiResult<Vec<usize>> {
    match (&req.card_ids, &req.polygon) {
        (Some(_), Some(_)) => Err(ApiError::bad_request(
            "give either card_ids or polygon, not both",
        )),
        (None, None) => Err(ApiError::bad_request("give card_ids or polygon")),
        (Some(ids), None) => {
            let mut seen = HashSet::new();
            let mut out = Vec::new();
            for id in ids {
                let i = s.position(id)?;
                if seen.insert(i) {
                    out.push(i);
                }
            }
            if out.is_empty() {
                return Err(ApiError::bad_request("selection is empty"));
            }
            Ok(out)
        }
        (None, Some(poly)) => {
            if poly.len() < 3 {
                return Err(ApiError::bad_request("polygon needs at least 3 vertices"));
            }
            if poly.iter().flatten().any(|v| !v.is_finite()) {
                return Err(ApiError::bad_request("polygon has non-finite coordinates"));
            }
            let proj = s.projections.get()?;
            let space = proj.space(req.space).ok_or_else(|| {
                ApiError::internal(format!("projections lack space {}", req.space))
            })?;
            let mut out = Vec::new();
            for p in &space.points {
                if point_in_polygon([p.x, p.y], poly) {
                    out.push(s.position(&p.card_id).map_err(|_| {
                        ApiError::internal(format!(
                            "projection point {} is not in the cohort",
                            p.card_id
                        ))
                    })?);
                }
            }
            if out.is_empty() {
                return Err(ApiError::bad_request("selection is empty"));
            }
            Ok(out)
        }
    }
}

async fn selection(
    State(s): State<Arc<AppState>>,
    body: Result<Json<SelectionRequest>, JsonRejection>,
) -> ApiResult<Json<SelectionResponse>> {
    let Json(req) = body?;
    let members = resolve_members(&s, &req)?;
    let st = s.clone();
    let idx = members.clone();
    let analytics = tokio::task::spawn_blocking(move || selection_analytics(&st, &idx))
        .await
        .map_err(ApiError::internal)?;
    let ids = members
        .iter()
        .map(|&i| s.record(i).card_id.clone())
        .collect();
    let actor = req.actor.as_deref().unwrap_or(ANONYMOUS);
    let selection = s
        .stores
        .record_selection(req.space, ids, Action::new(actor, ActionKind::Select, &req))
        .await?;
    Ok(Json(SelectionResponse {
        selection,
        analytics,
    }))
}

fn parse_class(raw: Option<&str>, default: DiagnosisLabel) -> ApiResult<DiagnosisLabel> {
    match raw {
        None => Ok(default),
        Some(c) => c.parse().map_err(|e: String| ApiError::bad_request(e)),
    }
}

fn image_links(card_id: &str, class: DiagnosisLabel) -> ImageLinks {
    ImageLinks {
        raw: format!("/api/image/{card_id}/raw"),
        cam: format!("/api/image/{card_id}/cam?class={}", class.name()),
    }
}

fn feature_rows(record: &PatientRecord, shap: &ShapleyAttribution) -> Vec<FeatureAttribution> {
    let values = record
        .indicators
        .as_ref()
        .map(|v| v.features())
        .unwrap_or_default();
    feature_names()
        .into_iter()
        .zip(values)
        .zip(&shap.phi)
        .map(|((name, value), &phi)| FeatureAttribution { name, value, phi })
        .collect()
}

async fn patient(
    State(s): State<Arc<AppState>>,
    Path(card_id): Path<String>,
    Query(q): Query<PatientQuery>,
) -> ApiResult<Json<PatientDetail>> {
    let i = s.position(&card_id)?;
    let prediction = s.predictions[i].clone();
    let predicted_class = prediction.fused.argmax();
    let target = parse_class(q.class.as_deref(), predicted_class)?;
    let b = bundle(&s, i, target).await?;
    let r = s.record(i);
    Ok(Json(PatientDetail {
        card_id: r.card_id.clone(),
        label: r.label,
        subset: s.dataset.subset_of(&r.card_id),
        predicted_class,
        target_class: target,
        mask: r.mask(),
        indicators: b.indicator.as_ref().map(|shap| IndicatorDetail {
            base_value: shap.base_value,
            prediction: shap.prediction,
            features: feature_rows(r, shap),
        }),
        text: b
            .text
            .as_ref()
            .zip(r.note.as_ref())
            .map(|(t, note)| TextDetail {
                raw_text: note.raw_text().to_string(),
                tokens: t.tokens.clone(),
                bias: t.bias,
                logit: t.logit,
            }),
        image: r.image.as_ref().map(|_| image_links(&r.card_id, target)),
        prediction,
    }))
}

async fn key_info(s: &Arc<AppState>, i: usize) -> ApiResult<PatientKeyInfo> {
    let prediction = s.predictions[i].clone();
    let predicted_class = prediction.fused.argmax();
    let b = bundle(s, i, predicted_class).await?;
    let r = s.record(i);
    let top_feature = b.indicator.as_ref().and_then(|shap| {
        feature_rows(r, shap)
            .into_iter()
            .reduce(|best, f| if f.phi > best.phi { f } else { best })
    });
    let top_tokens: Vec<TokenWeight> = b
        .text
        .as_ref()
        .map(|t| t.top(3).into_iter().cloned().collect())
        .unwrap_or_default();
    Ok(PatientKeyInfo {
        card_id: r.card_id.clone(),
        label: r.label,
        predicted_class,
        top_feature,
        top_tokens,
        image: r
            .image
            .as_ref()
            .map(|_| image_links(&r.card_id, predicted_class)),
        prediction,
    })
}

async fn compare(
    State(s): State<Arc<AppState>>,
    body: Result<Json<CompareRequest>, JsonRejection>,
) -> ApiResult<Json<ComparisonRecord>> {
    let Json(req) = body?;
    if req.card_a == req.card_b {
        return Err(ApiError::bad_request(
            "compare needs two different card_ids",
        ));
    }
    let (a, b) = (s.position(&req.card_a)?, s.position(&req.card_b)?);
    let (ka, kb) = (key_info(&s, a).await?, key_info(&s, b).await?);
    let actor = req.actor.as_deref().unwrap_or(ANONYMOUS);
    s.stores
        .record_compare(Action::new(actor, ActionKind::Compare, &req))
        .await?;
    Ok(Json(ComparisonRecord {
        card_ids: [req.card_a, req.card_b],
        patients: [ka, kb],
    }))
}

async fn add_note(
    State(s): State<Arc<AppState>>,
    body: Result<Json<NoteRequest>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<LearningNote>)> {
    let Json(req) = body?;
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("note text is empty"));
    }
    for id in &req.card_ids {
        s.position(id)?;
    }
    let author = req.author.clone().unwrap_or_else(|| ANONYMOUS.to_string());
    let action = Action::new(&author, ActionKind::Note, &req);
    let note = s
        .stores
        .add_note(author, req.card_ids, req.text, action)
        .await?;
    Ok((StatusCode::CREATED, Json(note)))
}

async fn list_notes(
    State(s): State<Arc<AppState>>,
    Query(q): Query<NotesQuery>,
) -> ApiResult<Json<Vec<LearningNote>>> {
    Ok(Json(s.stores.notes(q.card_id).await?))
}

async fn actions(State(s): State<Arc<AppState>>) -> ApiResult<Json<Vec<ActionLogEntry>>> {
    Ok(Json(s.stores.actions().await?))
}

async fn image(
    State(s): State<Arc<AppState>>,
    Path((card_id, kind)): Path<(String, String)>,
    Query(q): Query<PatientQuery>,
) -> ApiResult<Response> {
    let i = s.position(&card_id)?;
    let Some(scan) = &s.record(i).image else {
        return Err(ApiError::not_found(format!("{card_id} has no scan")));
    };
    let png = match kind.as_str() {
        "raw" => encode_gray_png(IMAGE_SIDE as u32, IMAGE_SIDE as u32, &scan.to_bytes())
            .map_err(ApiError::internal)?,
        "cam" => {
            let target = parse_class(q.class.as_deref(), s.predictions[i].fused.argmax())?;
            let b = bundle(&s, i, target).await?;
            let map = b
                .image
                .as_ref()
                .ok_or_else(|| ApiError::internal("bundle lacks a saliency map"))?;
            map.to_png().map_err(ApiError::internal)?
        }
        other => {
            return Err(ApiError::not_found(format!(
                "unknown image kind {other:?} (raw or cam)"
            )))
        }
    };
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}
