//! Decision-level fusion: a convex combination of the per-modality class
//! distributions with weights learned on the probability simplex. Also the
//! feature-level baseline it is compared against.

mod baseline;
mod compare;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{DiagnosisLabel, Modality, ModalityMask, N_CLASSES};
use crate::models::{ClassDistribution, ModelError, SIMPLEX_TOL};

pub use baseline::{train_feature_level_baseline, BaselineConfig, FeatureLevelClassifier};
pub use compare::{
    compare_fusion_strategies, evaluate_decision_level, evaluate_feature_level,
    FusionComparisonReport, UnimodalMetrics,
};

/// Probabilities below this are clamped inside the log loss.
const LOG_FLOOR: f64 = 1e-12;
const MIN_EXAMPLES: usize = 10;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("all modalities are masked")]
    NoModality,
    #[error("present modalities {0:?} carry zero total weight")]
    ZeroPresentWeight(Vec<Modality>),
    #[error("invalid modality weights {0:?}")]
    InvalidWeights([f64; 3]),
    #[error("weight learning needs at least {MIN_EXAMPLES} examples, got {0}")]
    TooFewExamples(usize),
    #[error("weight learning loss became non-finite at iteration {0}")]
    NonFiniteLoss(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Nonnegative modality weights summing to one, in modality order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "WeightsRepr", into = "WeightsRepr")]
pub struct ModalityWeights([f64; 3]);

#[derive(Serialize, Deserialize)]
struct WeightsRepr {
    indicator: f64,
    text: f64,
    image: f64,
}

impl TryFrom<WeightsRepr> for ModalityWeights {
    type Error = FusionError;

    fn try_from(r: WeightsRepr) -> Result<Self, FusionError> {
        Self::new([r.indicator, r.text, r.image])
    }
}

impl From<ModalityWeights> for WeightsRepr {
    fn from(w: ModalityWeights) -> Self {
        let [indicator, text, image] = w.0;
        Self {
            indicator,
            text,
            image,
        }
    }
}

impl ModalityWeights {
    pub fn new(w: [f64; 3]) -> Result<Self, FusionError> {
        let ok = w.iter().all(|v| v.is_finite() && *v >= 0.0)
            && (w.iter().sum::<f64>() - 1.0).abs() <= SIMPLEX_TOL;
        if ok {
            Ok(Self(w))
        } else {
            Err(FusionError::InvalidWeights(w))
        }
    }

    pub fn uniform() -> Self {
        Self([1.0 / 3.0; 3])
    }

    pub fn as_array(&self) -> [f64; 3] {
        self.0
    }

    pub fn get(&self, m: Modality) -> f64 {
        self.0[m.index()]
    }

    /// Weights restricted to the present modalities and rescaled to sum to
    /// one. Absent modalities get exactly zero. With everything present the
    /// weights come back untouched, so feeding the output of a masked call
    /// back in with a full mask reproduces it bit for bit.
    pub fn renormalized(&self, mask: ModalityMask) -> Result<[f64; 3], FusionError> {
        match mask.present_count() {
            0 => return Err(FusionError::NoModality),
            3 => return Ok(self.0),
            _ => {}
        }
        let total: f64 = (0..3).filter(|&m| mask.0[m]).map(|m| self.0[m]).sum();
        if total <= 0.0 {
            return Err(FusionError::ZeroPresentWeight(
                Modality::ALL
                    .into_iter()
                    .filter(|m| mask.is_present(*m))
                    .collect(),
            ));
        }
        Ok(std::array::from_fn(|m| {
            if mask.0[m] {
                self.0[m] / total
            } else {
                0.0
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedPrediction {
    pub fused: ClassDistribution,
    pub per_modality: [Option<ClassDistribution>; 3],
    /// Weights actually applied after renormalizing over present modalities.
    pub effective_weights: [f64; 3],
    /// `contribution_share[m][c] = w'_m * P_m(c) / fused(c)`.
    pub contribution_share: [[f64; N_CLASSES]; 3],
    pub present_mask: ModalityMask,
}

/// Fuses the present modalities' distributions with renormalized weights.
pub fn fuse(
    per_modality: &[Option<ClassDistribution>; 3],
    weights: &ModalityWeights,
) -> Result<FusedPrediction, FusionError> {
    let mask = ModalityMask(per_modality.map(|p| p.is_some()));
    let w = weights.renormalized(mask)?;
    let mut fused = [0.0; N_CLASSES];
    for (m, p) in per_modality.iter().enumerate() {
        if let Some(p) = p {
            let probs = p.probs();
            for c in 0..N_CLASSES {
                fused[c] += w[m] * probs[c];
            }
        }
    }
    let mut share = [[0.0; N_CLASSES]; 3];
    for c in 0..N_CLASSES {
        for (m, p) in per_modality.iter().enumerate() {
            if let Some(p) = p {
                // a class no present modality supports is split by weight
                share[m][c] = if fused[c] > 0.0 {
                    w[m] * p.probs()[c] / fused[c]
                } else {
                    w[m]
                };
            }
        }
    }
    Ok(FusedPrediction {
        fused: ClassDistribution::new(fused)?,
        per_modality: *per_modality,
        effective_weights: w,
        contribution_share: share,
        present_mask: mask,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightLearningConfig {
    pub iterations: usize,
    pub step: f64,
}

impl Default for WeightLearningConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedWeights {
    pub weights: ModalityWeights,
    /// Loss at the uniform start followed by the loss after each step.
    pub loss_trace: Vec<f64>,
    pub final_loss: f64,
}

/// Mean cross-entropy of the fused distribution for weights `w`.
pub fn fused_loss(
    preds: &[[ClassDistribution; 3]],
    labels: &[DiagnosisLabel],
    w: &[f64; 3],
) -> f64 {
    preds
        .iter()
        .zip(labels)
        .map(|(p, l)| {
            let f: f64 = (0..3).map(|m| w[m] * p[m].probs()[l.code()]).sum();
            -f.max(LOG_FLOOR).ln()
        })
        .sum::<f64>()
        / labels.len() as f64
}

fn loss_gradient(
    preds: &[[ClassDistribution; 3]],
    labels: &[DiagnosisLabel],
    w: &[f64; 3],
) -> [f64; 3] {
    let mut g = [0.0; 3];
    for (p, l) in preds.iter().zip(labels) {
        let py = [0, 1, 2].map(|m| p[m].probs()[l.code()]);
        let f: f64 = (0..3).map(|m| w[m] * py[m]).sum();
        if f > LOG_FLOOR {
            for m in 0..3 {
                g[m] -= py[m] / f;
            }
        }
    }
    g.map(|v| v / labels.len() as f64)
}

/// Euclidean projection onto the probability simplex (sort-based).
pub fn project_to_simplex(v: &[f64; 3]) -> [f64; 3] {
    let mut u = *v;
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &uj) in u.iter().enumerate() {
        cumulative += uj;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if uj - t > 0.0 {
            theta = t;
        }
    }
    v.map(|x| (x - theta).max(0.0))
}

/// Projected gradient descent on the fused cross-entropy from uniform
/// weights. The gradient is centered before each step, which leaves the
/// sum of the weights unchanged, and the best iterate is returned.
pub fn learn_weights(
    preds: &[[ClassDistribution; 3]],
    labels: &[DiagnosisLabel],
    config: &WeightLearningConfig,
) -> Result<LearnedWeights, FusionError> {
    if preds.len() != labels.len() {
        return Err(FusionError::DimensionMismatch(format!(
            "{} prediction rows for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if labels.len() < MIN_EXAMPLES {
        return Err(FusionError::TooFewExamples(labels.len()));
    }
    let mut w = ModalityWeights::uniform().as_array();
    let mut loss = fused_loss(preds, labels, &w);
    if !loss.is_finite() {
        return Err(FusionError::NonFiniteLoss(0));
    }
    let mut trace = vec![loss];
    let (mut best_w, mut best_loss) = (w, loss);
    for it in 1..=config.iterations {
        let g = loss_gradient(preds, labels, &w);
        let mean = g.iter().sum::<f64>() / 3.0;
        let stepped: [f64; 3] = std::array::from_fn(|m| w[m] - config.step * (g[m] - mean));
        w = project_to_simplex(&stepped);
        loss = fused_loss(preds, labels, &w);
        if !loss.is_finite() {
            return Err(FusionError::NonFiniteLoss(it));
        }
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_w = w;
        }
    }
    let total: f64 = best_w.iter().sum();
    Ok(LearnedWeights {
        weights: ModalityWeights::new(best_w.map(|v| v / total))?,
        loss_trace: trace,
        final_loss: best_loss,
    })
}
