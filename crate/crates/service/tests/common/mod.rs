#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use diag_assistant::api::types::*;
use diag_assistant::pipeline::{self, read_json, FusionMode, WeightsArtifact, WEIGHTS_FILE};
use diag_assistant::{router, AppState, Config};
use diag_core::cohort::{feature_names, DiagnosisLabel};
use diag_core::explain::token_attribution;
use diag_core::models::ModelSet;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

/// A cohort and models small enough to train in a few seconds.
pub const SMALL_CONFIG: &str = r#"
[synthetic]
n_patients = 90

[training.indicator]
n_trees = 20

[training.text]
embedding_dim = 16
max_epochs = 15

[training.image]
max_epochs = 4

[training.image.shape]
conv1 = 2
conv2 = 4
hidden = 16

[tsne]
perplexity = 10.0
iterations = 300
exaggeration_iterations = 100

[explain]
shapley_samples = 200
background_rows = 30
"#;

pub fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn small_config(dir: &Path) -> Config {
    let path = dir.join("diag-assistant.toml");
    fs::write(&path, SMALL_CONFIG).unwrap();
    Config::load(&path).unwrap()
}

/// Runs generate-data, train, evaluate and project into `scratch(name)`.
pub fn trained(name: &str) -> Config {
    let cfg = small_config(&scratch(name));
    pipeline::generate_data(&cfg).unwrap();
    pipeline::train(&cfg).unwrap();
    pipeline::evaluate(&cfg, FusionMode::Both).unwrap();
    pipeline::project(&cfg).unwrap();
    cfg
}

/// The same artifacts with an empty state directory of its own.
pub fn with_fresh_state(cfg: &Config, state: &Path) -> Config {
    Config {
        state_dir: state.to_path_buf(),
        ..cfg.clone()
    }
}

pub fn app(cfg: &Config) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::load(cfg).unwrap());
    (router(state.clone()), state)
}

pub async fn send(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp
        .into_body()
        .collect()
        .await
        .unwrap()
        .to_bytes()
        .to_vec();
    (status, bytes)
}

pub async fn get_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b) = send(app, Method::GET, uri, None).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

pub async fn post_json(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b) = send(app, Method::POST, uri, Some(body)).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

/// Deserializes `v` as `T` and checks that re-serializing gives `v` back, so
/// the body has exactly the published fields.
pub fn conforms<T: serde::de::DeserializeOwned + serde::Serialize>(v: &Value) -> Result<T, String> {
    let t: T = serde_json::from_value(v.clone()).map_err(|e| format!("{e}: {v}"))?;
    let back = serde_json::to_value(&t).unwrap();
    if &back != v {
        return Err(format!("round trip changed the body: {v} vs {back}"));
    }
    Ok(t)
}

/// Independent recomputation of the selection analytics from the saved
/// artifacts.
pub fn brute_force(cfg: &Config, members: &[String]) -> SelectionAnalytics {
    let (ds, _) = diag_assistant::pipeline::load_dataset(cfg).unwrap();
    let models = ModelSet::load(&cfg.artifact_dir).unwrap();
    let w: WeightsArtifact = read_json(&cfg.artifact(WEIGHTS_FILE), "train").unwrap();
    let w = w.learned.weights.as_array();
    let n = members.len() as f64;
    let mut predicted = [0; 3];
    let mut truth = [0; 3];
    let mut sums = [[0.0; 3]; 3];
    let mut counts = [0usize; 3];
    let mut contribution = [[0.0; 3]; 3];
    let mut fused_mean = [0.0; 3];
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut tokens: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    let mut thumbs: [Vec<String>; 3] = Default::default();
    for id in members {
        let r = ds.get(id).unwrap();
        let preds = models.predict_record(r).unwrap();
        let present: f64 = (0..3).filter(|&m| preds[m].is_some()).map(|m| w[m]).sum();
        let all = preds.iter().all(|p| p.is_some());
        let mut fused = [0.0; 3];
        for m in 0..3 {
            if let Some(p) = preds[m] {
                let wm = if all { w[m] } else { w[m] / present };
                counts[m] += 1;
                for c in 0..3 {
                    sums[m][c] += p.probs()[c];
                    contribution[m][c] += wm * p.probs()[c] / n;
                    fused[c] += wm * p.probs()[c];
                }
            }
        }
        let mut arg = 0;
        for c in 1..3 {
            if fused[c] > fused[arg] {
                arg = c;
            }
        }
        predicted[arg] += 1;
        if let Some(l) = r.label {
            truth[l.code()] += 1;
        }
        for c in 0..3 {
            fused_mean[c] += fused[c] / n;
        }
        features.push(r.indicators.as_ref().unwrap().features());
        let target = DiagnosisLabel::ALL[arg];
        for t in token_attribution(&models.text, r.note.as_ref().unwrap(), target).tokens {
            let e = tokens.entry(t.token).or_insert((0.0, 0));
            e.0 += t.weight;
            e.1 += 1;
        }
        thumbs[arg].push(id.clone());
    }
    let mean = |m: usize| (counts[m] > 0).then(|| sums[m].map(|v| v / counts[m] as f64));
    let indicators = feature_names()
        .into_iter()
        .enumerate()
        .map(|(j, name)| {
            let values: Vec<f64> = features.iter().map(|f| f[j]).collect();
            IndicatorSummary {
                name,
                min: values.iter().cloned().fold(f64::MAX, f64::min),
                max: values.iter().cloned().fold(f64::MIN, f64::max),
                mean: values.iter().sum::<f64>() / values.len() as f64,
                values,
            }
        })
        .collect();
    let mut token_weights: Vec<TokenMean> = tokens
        .into_iter()
        .map(|(token, (s, c))| TokenMean {
            token,
            mean_weight: s / c as f64,
            count: c,
        })
        .collect();
    token_weights.sort_by(|a, b| {
        b.mean_weight
            .partial_cmp(&a.mean_weight)
            .unwrap()
            .then(a.token.cmp(&b.token))
    });
    SelectionAnalytics {
        size: members.len(),
        predicted_class_counts: predicted,
        true_class_counts: truth,
        modality_mean: PerModality::from_array([mean(0), mean(1), mean(2)]),
        contribution_pmf: PerModality::from_array(contribution),
        fused_mean,
        indicators,
        token_weights,
        thumbnails: DiagnosisLabel::ALL
            .iter()
            .zip(thumbs)
            .map(|(&predicted_class, card_ids)| ThumbnailGroup {
                predicted_class,
                card_ids,
            })
            .collect(),
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12
}

/// Compares two analytics bodies, floats to 1e-12.
pub fn analytics_agree(got: &SelectionAnalytics, want: &SelectionAnalytics) -> Result<(), String> {
    let check = |ok: bool, what: &str| {
        if ok {
            Ok(())
        } else {
            Err(format!("{what} differs"))
        }
    };
    check(got.size == want.size, "size")?;
    check(
        got.predicted_class_counts == want.predicted_class_counts,
        "predicted class counts",
    )?;
    check(
        got.true_class_counts == want.true_class_counts,
        "true class counts",
    )?;
    let all_close =
        |a: &[f64], b: &[f64]| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(*x, *y));
    let pmf = |p: &PerModality<[f64; 3]>| [p.indicator, p.text, p.image];
    for (g, w) in pmf(&got.contribution_pmf)
        .iter()
        .zip(pmf(&want.contribution_pmf))
    {
        check(all_close(g, &w), "contribution pmf")?;
    }
    let means = |p: &PerModality<Option<[f64; 3]>>| [p.indicator, p.text, p.image];
    for (g, w) in means(&got.modality_mean)
        .iter()
        .zip(means(&want.modality_mean))
    {
        let ok = match (g, w) {
            (Some(g), Some(w)) => all_close(g, &w),
            (None, None) => true,
            _ => false,
        };
        check(ok, "modality mean")?;
    }
    check(all_close(&got.fused_mean, &want.fused_mean), "fused mean")?;
    check(
        got.indicators.len() == 37 && want.indicators.len() == 37,
        "indicator count",
    )?;
    for (g, w) in got.indicators.iter().zip(&want.indicators) {
        let same = (&g.name, g.min, g.max, &g.values) == (&w.name, w.min, w.max, &w.values);
        check(
            same && close(g.mean, w.mean),
            &format!("indicator {}", g.name),
        )?;
    }
    check(
        got.token_weights.len() == want.token_weights.len(),
        "token count",
    )?;
    for (g, w) in got.token_weights.iter().zip(&want.token_weights) {
        let same =
            (&g.token, g.count) == (&w.token, w.count) && close(g.mean_weight, w.mean_weight);
        check(same, &format!("token {}", g.token))?;
    }
    check(got.thumbnails == want.thumbnails, "thumbnails")
}
