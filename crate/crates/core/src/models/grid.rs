use serde::{Deserialize, Serialize};

use super::{
    evaluate, labels_of, train_image_model, train_indicator_model, train_text_model, BoostParams,
    ClassDistribution, ImageParams, ModelError, TextParams,
};
use crate::cohort::{kfold_labels, Modality, PatientRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoostGrid {
    pub base: BoostParams,
    pub n_trees: Vec<usize>,
    pub max_depth: Vec<usize>,
    pub learning_rate: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextGrid {
    pub base: TextParams,
    pub learning_rate: Vec<f64>,
    pub batch_size: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageGrid {
    pub base: ImageParams,
    pub learning_rate: Vec<f64>,
}

/// Candidate values per hyperparameter; unlisted fields come from `base`.
/// Points are enumerated with the first-listed field varying slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", rename_all = "lowercase")]
pub enum HyperparamGrid {
    Indicator(BoostGrid),
    Text(TextGrid),
    Image(ImageGrid),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "modality", content = "params", rename_all = "lowercase")]
pub enum Hyperparams {
    Indicator(BoostParams),
    Text(TextParams),
    Image(ImageParams),
}

impl Hyperparams {
    /// Short description of the searched fields.
    pub fn label(&self) -> String {
        match self {
            Hyperparams::Indicator(p) => format!(
                "n_trees={} max_depth={} learning_rate={}",
                p.n_trees, p.max_depth, p.learning_rate
            ),
            Hyperparams::Text(p) => format!(
                "learning_rate={} batch_size={}",
                p.learning_rate, p.batch_size
            ),
            Hyperparams::Image(p) => format!("learning_rate={}", p.learning_rate),
        }
    }
}

fn nonempty<T>(name: &str, v: &[T]) -> Result<(), ModelError> {
    if v.is_empty() {
        Err(ModelError::InvalidHyperparams(format!(
            "grid list {name} is empty"
        )))
    } else {
        Ok(())
    }
}

impl HyperparamGrid {
    pub fn modality(&self) -> Modality {
        match self {
            HyperparamGrid::Indicator(_) => Modality::Indicator,
            HyperparamGrid::Text(_) => Modality::Text,
            HyperparamGrid::Image(_) => Modality::Image,
        }
    }

    pub fn points(&self) -> Result<Vec<Hyperparams>, ModelError> {
        let mut out = Vec::new();
        match self {
            HyperparamGrid::Indicator(g) => {
                nonempty("n_trees", &g.n_trees)?;
                nonempty("max_depth", &g.max_depth)?;
                nonempty("learning_rate", &g.learning_rate)?;
                for &n_trees in &g.n_trees {
                    for &max_depth in &g.max_depth {
                        for &learning_rate in &g.learning_rate {
                            out.push(Hyperparams::Indicator(BoostParams {
                                n_trees,
                                max_depth,
                                learning_rate,
                                ..g.base.clone()
                            }));
                        }
                    }
                }
            }
            HyperparamGrid::Text(g) => {
                nonempty("learning_rate", &g.learning_rate)?;
                nonempty("batch_size", &g.batch_size)?;
                for &learning_rate in &g.learning_rate {
                    for &batch_size in &g.batch_size {
                        out.push(Hyperparams::Text(TextParams {
                            learning_rate,
                            batch_size,
                            ..g.base.clone()
                        }));
                    }
                }
            }
            HyperparamGrid::Image(g) => {
                nonempty("learning_rate", &g.learning_rate)?;
                for &learning_rate in &g.learning_rate {
                    out.push(Hyperparams::Image(ImageParams {
                        learning_rate,
                        ..g.base.clone()
                    }));
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: Hyperparams,
    /// Macro F1 per fold; empty when the grid has a single point and
    /// cross-validation is skipped.
    pub fold_f1: Vec<f64>,
    pub mean_f1: Option<f64>,
    pub std_f1: Option<f64>,
    /// Some fold's training diverged; that fold scored 0.
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub modality: Modality,
    pub k: usize,
    pub rows: Vec<GridRow>,
    pub best: usize,
}

type Predictor = Box<dyn Fn(&PatientRecord) -> Result<ClassDistribution, ModelError>>;

fn train_predictor(point: &Hyperparams, train: &[&PatientRecord]) -> Result<Predictor, ModelError> {
    fn need<T>(r: &PatientRecord, m: Modality, x: Option<T>) -> Result<T, ModelError> {
        x.ok_or_else(|| super::missing(r, m))
    }
    Ok(match point {
        Hyperparams::Indicator(p) => {
            let m = train_indicator_model(train, p)?;
            Box::new(move |r| m.predict_proba(need(r, Modality::Indicator, r.indicators.as_ref())?))
        }
        Hyperparams::Text(p) => {
            let m = train_text_model(train, p)?;
            Box::new(move |r| Ok(m.predict_proba(need(r, Modality::Text, r.note.as_ref())?)))
        }
        Hyperparams::Image(p) => {
            let m = train_image_model(train, p)?;
            Box::new(move |r| m.predict_proba(need(r, Modality::Image, r.image.as_ref())?))
        }
    })
}

/// Exhaustive k-fold search scored by mean macro F1. Ties keep the earliest
/// point; a single-point grid is returned without cross-validation.
pub fn grid_search(
    grid: &HyperparamGrid,
    records: &[&PatientRecord],
    k: usize,
    seed: u64,
) -> Result<(Hyperparams, GridReport), ModelError> {
    let points = grid.points()?;
    let modality = grid.modality();
    if points.len() == 1 {
        let point = points[0].clone();
        let row = GridRow {
            point: point.clone(),
            fold_f1: Vec::new(),
            mean_f1: None,
            std_f1: None,
            diverged: false,
        };
        return Ok((
            point,
            GridReport {
                modality,
                k,
                rows: vec![row],
                best: 0,
            },
        ));
    }
    let folds = kfold_labels(&labels_of(records)?, k, seed)?;
    let mut rows = Vec::with_capacity(points.len());
    for point in points {
        let annotate = |e: ModelError| ModelError::GridPoint {
            point: point.label(),
            source: Box::new(e),
        };
        let mut fold_f1 = Vec::with_capacity(k);
        let mut diverged = false;
        for fold in &folds {
            let train: Vec<&PatientRecord> = fold.train.iter().map(|&i| records[i]).collect();
            let val: Vec<&PatientRecord> = fold.val.iter().map(|&i| records[i]).collect();
            match train_predictor(&point, &train) {
                Ok(predict) => fold_f1.push(evaluate(predict, &val).map_err(annotate)?.macro_f1),
                Err(ModelError::Diverged { .. }) => {
                    diverged = true;
                    fold_f1.push(0.0);
                }
                Err(e) => return Err(annotate(e)),
            }
        }
        let mean = fold_f1.iter().sum::<f64>() / fold_f1.len() as f64;
        let var = fold_f1.iter().map(|f| (f - mean).powi(2)).sum::<f64>() / fold_f1.len() as f64;
        rows.push(GridRow {
            point,
            fold_f1,
            mean_f1: Some(mean),
            std_f1: Some(var.sqrt()),
            diverged,
        });
    }
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.mean_f1 > rows[best].mean_f1 {
            best = i;
        }
    }
    Ok((
        rows[best].point.clone(),
        GridReport {
            modality,
            k,
            rows,
            best,
        },
    ))
}
