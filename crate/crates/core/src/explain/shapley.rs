//! Interventional Shapley values over a background sample.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cohort::{DiagnosisLabel, N_CLASSES};

use super::ExplainError;

/// Largest feature count the exact enumerator accepts.
pub const MAX_EXACT_FEATURES: usize = 15;
pub const MIN_SAMPLES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyAttribution {
    /// Mean model output for the target class over the background.
    pub base_value: f64,
    pub phi: Vec<f64>,
    pub target_class: DiagnosisLabel,
    /// Model output for the target class on the explained input.
    pub prediction: f64,
}

fn check_inputs(x: &[f64], background: &[Vec<f64>]) -> Result<(), ExplainError> {
    if background.is_empty() {
        return Err(ExplainError::EmptyBackground);
    }
    if let Some(b) = background.iter().find(|b| b.len() != x.len()) {
        return Err(ExplainError::DimensionMismatch(format!(
            "input has {} features, background row has {}",
            x.len(),
            b.len()
        )));
    }
    Ok(())
}

fn base_value<F>(f: &F, background: &[Vec<f64>], c: usize) -> f64
where
    F: Fn(&[f64]) -> [f64; N_CLASSES],
{
    background.iter().map(|b| f(b)[c]).sum::<f64>() / background.len() as f64
}

/// Exact enumeration over all 2^n coalitions. `v(S)` averages the model over
/// the background with the features outside `S` taken from each background row.
pub fn exact_shapley<F>(
    predict: F,
    x: &[f64],
    background: &[Vec<f64>],
    target: DiagnosisLabel,
) -> Result<ShapleyAttribution, ExplainError>
where
    F: Fn(&[f64]) -> [f64; N_CLASSES],
{
    let n = x.len();
    if n > MAX_EXACT_FEATURES {
        return Err(ExplainError::TooManyFeatures(n));
    }
    check_inputs(x, background)?;
    let c = target.code();
    let mut value = vec![0.0; 1 << n];
    let mut z = vec![0.0; n];
    for (mask, v) in value.iter_mut().enumerate() {
        let mut total = 0.0;
        for b in background {
            for i in 0..n {
                z[i] = if mask >> i & 1 == 1 { x[i] } else { b[i] };
            }
            total += predict(&z)[c];
        }
        *v = total / background.len() as f64;
    }
    // weight(s) = s!(n-s-1)!/n!
    let mut weight = vec![0.0; n];
    for (s, w) in weight.iter_mut().enumerate() {
        *w = 1.0 / (n as f64 * binomial(n - 1, s));
    }
    let mut phi = vec![0.0; n];
    for mask in 0..(1usize << n) {
        let size = mask.count_ones() as usize;
        for (i, p) in phi.iter_mut().enumerate() {
            if mask >> i & 1 == 0 {
                *p += weight[size] * (value[mask | 1 << i] - value[mask]);
            }
        }
    }
    Ok(ShapleyAttribution {
        base_value: value[0],
        phi,
        target_class: target,
        prediction: value[(1 << n) - 1],
    })
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Permutation sampling with antithetic pairs: every sampled ordering is
/// followed by its reverse, both starting from the same random background
/// row. Any leftover efficiency gap is spread over the features in
/// proportion to `|phi_i|`.
pub fn sampled_shapley<F>(
    predict: F,
    x: &[f64],
    background: &[Vec<f64>],
    target: DiagnosisLabel,
    n_samples: usize,
    seed: u64,
) -> Result<ShapleyAttribution, ExplainError>
where
    F: Fn(&[f64]) -> [f64; N_CLASSES],
{
    check_inputs(x, background)?;
    if n_samples < MIN_SAMPLES {
        return Err(ExplainError::TooFewSamples(n_samples));
    }
    let n = x.len();
    let c = target.code();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut phi = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut drawn = 0;
    while drawn < n_samples {
        order.shuffle(&mut rng);
        let b = background.choose(&mut rng).expect("nonempty background");
        for pass in 0..2 {
            if drawn == n_samples {
                break;
            }
            z.copy_from_slice(b);
            let mut prev = predict(&z)[c];
            for k in 0..n {
                let i = if pass == 0 {
                    order[k]
                } else {
                    order[n - 1 - k]
                };
                z[i] = x[i];
                let next = predict(&z)[c];
                phi[i] += next - prev;
                prev = next;
            }
            drawn += 1;
        }
    }
    for p in &mut phi {
        *p /= n_samples as f64;
    }
    let base = base_value(&predict, background, c);
    let prediction = predict(x)[c];
    let residual = prediction - base - phi.iter().sum::<f64>();
    let scale: f64 = phi.iter().map(|p| p.abs()).sum();
    if scale > 0.0 {
        for p in &mut phi {
            *p += residual * p.abs() / scale;
        }
    } else if n > 0 {
        for p in &mut phi {
            *p += residual / n as f64;
        }
    }
    Ok(ShapleyAttribution {
        base_value: base,
        phi,
        target_class: target,
        prediction,
    })
}

/// Seeded sample of `k` rows without replacement (all rows when fewer).
pub fn sample_background(rows: &[Vec<f64>], k: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.shuffle(&mut rng);
    idx.truncate(k);
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use DiagnosisLabel::Normal;

    fn additive(w: Vec<f64>) -> impl Fn(&[f64]) -> [f64; N_CLASSES] {
        move |z: &[f64]| [z.iter().zip(&w).map(|(a, b)| a * b).sum(), 0.0, 0.0]
    }

    #[test]
    fn additive_model_closed_form() {
        let bg = vec![vec![0.0, 0.0]];
        let s = exact_shapley(additive(vec![1.0, 1.0]), &[2.0, 3.0], &bg, Normal).unwrap();
        assert!((s.phi[0] - 2.0).abs() < 1e-12);
        assert!((s.phi[1] - 3.0).abs() < 1e-12);
        assert_eq!(s.base_value, 0.0);
    }

    #[test]
    fn axioms_hold_on_interacting_model() {
        // product term makes coalitions matter; feature 3 is ignored
        let f = |z: &[f64]| [z[0] * z[1] + z[2] + (z[0] + z[1]).sin(), 0.0, 0.0];
        let bg: Vec<Vec<f64>> = (0..7)
            .map(|i| vec![i as f64 * 0.3, i as f64 * 0.3, -(i as f64), 5.0])
            .collect();
        let x = [1.5, 1.5, 2.0, -4.0];
        let s = exact_shapley(f, &x, &bg, Normal).unwrap();
        assert!((s.base_value + s.phi.iter().sum::<f64>() - f(&x)[0]).abs() < 1e-9);
        assert!((s.phi[0] - s.phi[1]).abs() < 1e-9);
        assert!(s.phi[3].abs() < 1e-9);
    }

    #[test]
    fn linearity_over_models() {
        let bg: Vec<Vec<f64>> = (0..5)
            .map(|i| vec![i as f64, 1.0 - i as f64, 0.5 * i as f64])
            .collect();
        let x = [2.0, -1.0, 3.0];
        let (wf, wg) = (vec![1.0, 2.0, -1.0], vec![0.5, -3.0, 4.0]);
        let wsum: Vec<f64> = wf.iter().zip(&wg).map(|(a, b)| a + b).collect();
        let a = exact_shapley(additive(wf), &x, &bg, Normal).unwrap();
        let b = exact_shapley(additive(wg), &x, &bg, Normal).unwrap();
        let s = exact_shapley(additive(wsum), &x, &bg, Normal).unwrap();
        for i in 0..3 {
            assert!((s.phi[i] - a.phi[i] - b.phi[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn guards() {
        let bg = vec![vec![0.0; 16]];
        assert!(matches!(
            exact_shapley(additive(vec![1.0; 16]), &[1.0; 16], &bg, Normal),
            Err(ExplainError::TooManyFeatures(16))
        ));
        assert!(matches!(
            sampled_shapley(additive(vec![1.0; 2]), &[1.0; 2], &[], Normal, 100, 0),
            Err(ExplainError::EmptyBackground)
        ));
        assert!(matches!(
            sampled_shapley(
                additive(vec![1.0; 2]),
                &[1.0; 2],
                &[vec![0.0; 2]],
                Normal,
                99,
                0
            ),
            Err(ExplainError::TooFewSamples(99))
        ));
    }

    #[test]
    fn sampled_is_exact_on_additive_models_and_efficient() {
        let bg: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 * 0.1; 5]).collect();
        let x = [1.0, -2.0, 0.5, 3.0, 0.0];
        let f = additive(vec![1.0, 0.5, -1.0, 2.0, 7.0]);
        let exact = exact_shapley(&f, &x, &bg, Normal).unwrap();
        let s = sampled_shapley(&f, &x, &bg, Normal, 400, 9).unwrap();
        assert!((s.base_value + s.phi.iter().sum::<f64>() - s.prediction).abs() <= 1e-9);
        // one background row per permutation, so only the mean over rows is random
        for (a, b) in s.phi.iter().zip(&exact.phi) {
            assert!((a - b).abs() < 0.2, "{a} vs {b}");
        }
        assert_eq!(s, sampled_shapley(&f, &x, &bg, Normal, 400, 9).unwrap());
    }

    #[test]
    fn background_sample_is_seeded() {
        let rows: Vec<Vec<f64>> = (0..300).map(|i| vec![i as f64]).collect();
        let a = sample_background(&rows, 100, 4);
        assert_eq!(a.len(), 100);
        assert_eq!(a, sample_background(&rows, 100, 4));
        assert_eq!(sample_background(&rows[..20], 100, 4).len(), 20);
    }
}
