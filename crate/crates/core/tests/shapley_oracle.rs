use diag_core::cohort::{generate_synthetic_cohort, DiagnosisLabel, Subset, SyntheticConfig};
use diag_core::explain::{exact_shapley, sample_background, sampled_shapley, ShapleyAttribution};
use diag_core::models::{BoostParams, IndicatorModel};

/// A GBDT on the first eight features of the default cohort, a background
/// sample and one validation patient.
fn submodel() -> (IndicatorModel, Vec<Vec<f64>>, Vec<f64>) {
    let (ds, _) = generate_synthetic_cohort(&SyntheticConfig::default()).unwrap();
    let rows = |subset| -> (Vec<Vec<f64>>, Vec<DiagnosisLabel>) {
        ds.subset(subset)
            .iter()
            .map(|r| {
                (
                    r.indicators.as_ref().unwrap().features()[..8].to_vec(),
                    r.label.unwrap(),
                )
            })
            .unzip()
    };
    let (x, y) = rows(Subset::Train);
    let model = IndicatorModel::fit(&x, &y, &BoostParams::default()).unwrap();
    let background = sample_background(&x, 100, 0);
    let (val, _) = rows(Subset::Val);
    (model, background, val[0].clone())
}

fn max_abs_diff(a: &ShapleyAttribution, b: &ShapleyAttribution) -> f64 {
    a.phi
        .iter()
        .zip(&b.phi)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn mean_abs_diff(a: &ShapleyAttribution, b: &ShapleyAttribution) -> f64 {
    a.phi
        .iter()
        .zip(&b.phi)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.phi.len() as f64
}

#[test]
fn sampled_matches_exact_on_gbdt_submodel() {
    let (model, bg, x) = submodel();
    let f = |z: &[f64]| model.predict_features(z).unwrap().probs();
    for target in DiagnosisLabel::ALL {
        let exact = exact_shapley(f, &x, &bg, target).unwrap();
        assert!(
            (exact.base_value + exact.phi.iter().sum::<f64>() - f(&x)[target.code()]).abs() <= 1e-6
        );
        let sampled = sampled_shapley(f, &x, &bg, target, 2000, 0).unwrap();
        assert!(
            max_abs_diff(&sampled, &exact) <= 0.05,
            "{target}: {:?} vs {:?}",
            sampled.phi,
            exact.phi
        );
        assert!(
            (sampled.base_value + sampled.phi.iter().sum::<f64>() - sampled.prediction).abs()
                <= 1e-9
        );
    }
}

#[test]
fn more_samples_do_not_hurt() {
    let (model, bg, x) = submodel();
    let f = |z: &[f64]| model.predict_features(z).unwrap().probs();
    let target = DiagnosisLabel::Herniated;
    let exact = exact_shapley(f, &x, &bg, target).unwrap();
    let small = sampled_shapley(f, &x, &bg, target, 100, 3).unwrap();
    let large = sampled_shapley(f, &x, &bg, target, 10_000, 3).unwrap();
    assert!(mean_abs_diff(&large, &exact) <= mean_abs_diff(&small, &exact));
}

#[test]
fn estimator_is_unbiased_across_seeds() {
    let (model, bg, x) = submodel();
    let f = |z: &[f64]| model.predict_features(z).unwrap().probs();
    let target = DiagnosisLabel::Bulging;
    let exact = exact_shapley(f, &x, &bg, target).unwrap();
    let mut mean = vec![0.0; exact.phi.len()];
    for seed in 0..50 {
        let s = sampled_shapley(f, &x, &bg, target, 200, seed).unwrap();
        for (m, p) in mean.iter_mut().zip(&s.phi) {
            *m += p / 50.0;
        }
    }
    for (m, e) in mean.iter().zip(&exact.phi) {
        assert!((m - e).abs() <= 0.02, "{m} vs {e}");
    }
}
