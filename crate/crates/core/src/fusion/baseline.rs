//! Feature-level fusion baseline: multinomial logistic regression over the
//! concatenated per-modality embeddings.

use serde::{Deserialize, Serialize};

use crate::cohort::{DiagnosisLabel, N_CLASSES};
use crate::models::{ClassDistribution, ModelError, Standardizer};

use super::FusionError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub learning_rate: f64,
    pub iterations: usize,
    pub l2: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            iterations: 1000,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FeatureLevelClassifier {
    standardizer: Standardizer,
    /// Row-major `N_CLASSES x dim`.
    weights: Vec<f64>,
    bias: [f64; N_CLASSES],
}

impl FeatureLevelClassifier {
    pub fn dim(&self) -> usize {
        self.standardizer.mean.len()
    }

    fn logits(&self, z: &[f64]) -> [f64; N_CLASSES] {
        let d = self.dim();
        std::array::from_fn(|c| {
            self.bias[c]
                + self.weights[c * d..(c + 1) * d]
                    .iter()
                    .zip(z)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        })
    }

    pub fn predict(&self, x: &[f64]) -> Result<ClassDistribution, FusionError> {
        if x.len() != self.dim() {
            return Err(FusionError::DimensionMismatch(format!(
                "expected {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(ClassDistribution::from_logits(
            &self.logits(&self.standardizer.transform(x)),
        ))
    }
}

/// Full-batch gradient descent from zero weights and log-prior bias.
/// Deterministic: there is no sampling anywhere.
pub fn train_feature_level_baseline(
    rows: &[Vec<f64>],
    labels: &[DiagnosisLabel],
    config: &BaselineConfig,
) -> Result<FeatureLevelClassifier, FusionError> {
    if rows.len() != labels.len() {
        return Err(FusionError::DimensionMismatch(format!(
            "{} rows for {} labels",
            rows.len(),
            labels.len()
        )));
    }
    let bias = crate::models::log_priors(labels)?;
    let d = rows[0].len();
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(FusionError::DimensionMismatch(format!(
            "ragged rows: {} and {} features",
            d,
            r.len()
        )));
    }
    let standardizer = Standardizer::fit(rows);
    let z: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.transform(r)).collect();
    let mut model = FeatureLevelClassifier {
        standardizer,
        weights: vec![0.0; N_CLASSES * d],
        bias,
    };
    let n = rows.len() as f64;
    for _ in 0..config.iterations {
        let mut gw = vec![0.0; N_CLASSES * d];
        let mut gb = [0.0; N_CLASSES];
        for (x, l) in z.iter().zip(labels) {
            let p = ClassDistribution::from_logits(&model.logits(x)).probs();
            for c in 0..N_CLASSES {
                let r = p[c] - f64::from(u8::from(c == l.code()));
                gb[c] += r;
                for (g, xv) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += r * xv;
                }
            }
        }
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= config.learning_rate * (g / n + config.l2 * *w);
        }
        for c in 0..N_CLASSES {
            model.bias[c] -= config.learning_rate * gb[c] / n;
        }
        if model
            .weights
            .iter()
            .chain(&model.bias)
            .any(|v| !v.is_finite())
        {
            return Err(ModelError::Diverged {
                epoch: 0,
                last_finite_epoch: None,
            }
            .into());
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use DiagnosisLabel::*;

    #[test]
    fn separable_toy_embeddings_fit_perfectly() {
        let mut rows = vec![];
        let mut labels = vec![];
        for i in 0..30 {
            let l = DiagnosisLabel::ALL[i % 3];
            let mut x = vec![0.1 * (i as f64 % 5.0); 4];
            x[l.code()] += 3.0;
            rows.push(x);
            labels.push(l);
        }
        let m = train_feature_level_baseline(&rows, &labels, &BaselineConfig::default()).unwrap();
        for (x, l) in rows.iter().zip(&labels) {
            assert_eq!(m.predict(x).unwrap().argmax(), *l);
        }
    }

    #[test]
    fn zero_embeddings_predict_priors() {
        let labels = [Normal, Normal, Bulging, Herniated, Herniated, Herniated];
        let rows = vec![vec![0.0; 5]; labels.len()];
        let m = train_feature_level_baseline(&rows, &labels, &BaselineConfig::default()).unwrap();
        let p = m.predict(&[0.0; 5]).unwrap().probs();
        for (got, want) in p.iter().zip([2.0 / 6.0, 3.0 / 6.0, 1.0 / 6.0]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|i| vec![(i as f64).sin(), (i as f64).cos()])
            .collect();
        let labels: Vec<DiagnosisLabel> = (0..12).map(|i| DiagnosisLabel::ALL[i % 3]).collect();
        let a = train_feature_level_baseline(&rows, &labels, &BaselineConfig::default()).unwrap();
        let b = train_feature_level_baseline(&rows, &labels, &BaselineConfig::default()).unwrap();
        assert_eq!(a.weights, b.weights);
        assert!(a.predict(&[1.0]).is_err());
    }
}
