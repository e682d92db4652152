use std::collections::HashMap;

use diag_core::cohort::{feature_names, DiagnosisLabel, N_CLASSES};
use diag_core::explain::token_attribution;

use super::types::{IndicatorSummary, PerModality, SelectionAnalytics, ThumbnailGroup, TokenMean};
use super::AppState;

fn mean_of(rows: &[[f64; N_CLASSES]]) -> Option<[f64; N_CLASSES]> {
    if rows.is_empty() {
        return None;
    }
    let mut m = [0.0; N_CLASSES];
    for r in rows {
        for c in 0..N_CLASSES {
            m[c] += r[c];
        }
    }
    Some(m.map(|v| v / rows.len() as f64))
}

/// Analytics over the records at `members` (dataset positions, nonempty).
pub fn selection_analytics(state: &AppState, members: &[usize]) -> SelectionAnalytics {
    let records = state.dataset.records();
    let n = members.len() as f64;
    let mut predicted_class_counts = [0; N_CLASSES];
    let mut true_class_counts = [0; N_CLASSES];
    let mut per_modality: [Vec<[f64; N_CLASSES]>; 3] = Default::default();
    let mut contribution = [[0.0; N_CLASSES]; 3];
    let mut fused_mean = [0.0; N_CLASSES];
    let mut feature_rows: Vec<Vec<f64>> = Vec::new();
    let mut tokens: HashMap<&str, (f64, usize)> = HashMap::new();
    let mut thumbs: [Vec<String>; N_CLASSES] = Default::default();

    for &i in members {
        let r = &records[i];
        let p = &state.predictions[i];
        let predicted = p.fused.argmax();
        predicted_class_counts[predicted.code()] += 1;
        if let Some(l) = r.label {
            true_class_counts[l.code()] += 1;
        }
        for m in 0..3 {
            if let Some(d) = p.per_modality[m] {
                let probs = d.probs();
                per_modality[m].push(probs);
                for c in 0..N_CLASSES {
                    contribution[m][c] += p.effective_weights[m] * probs[c] / n;
                }
            }
        }
        for (acc, v) in fused_mean.iter_mut().zip(p.fused.probs()) {
            *acc += v / n;
        }
        if let Some(ind) = &r.indicators {
            feature_rows.push(ind.features());
        }
        if let Some(note) = &r.note {
            for t in token_attribution(&state.models.text, note, predicted).tokens {
                let slot = tokens
                    .entry(note_token(note, t.position))
                    .or_insert((0.0, 0));
                slot.0 += t.weight;
                slot.1 += 1;
            }
        }
        if r.image.is_some() {
            thumbs[predicted.code()].push(r.card_id.clone());
        }
    }

    let indicators = if feature_rows.is_empty() {
        Vec::new()
    } else {
        feature_names()
            .into_iter()
            .enumerate()
            .map(|(j, name)| {
                let values: Vec<f64> = feature_rows.iter().map(|row| row[j]).collect();
                IndicatorSummary {
                    name,
                    min: values.iter().copied().fold(f64::INFINITY, f64::min),
                    max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    mean: values.iter().sum::<f64>() / values.len() as f64,
                    values,
                }
            })
            .collect()
    };

    let mut token_weights: Vec<TokenMean> = tokens
        .into_iter()
        .map(|(token, (sum, count))| TokenMean {
            token: token.to_string(),
            mean_weight: sum / count as f64,
            count,
        })
        .collect();
    token_weights.sort_by(|a, b| {
        b.mean_weight
            .total_cmp(&a.mean_weight)
            .then_with(|| a.token.cmp(&b.token))
    });

    SelectionAnalytics {
        size: members.len(),
        predicted_class_counts,
        true_class_counts,
        modality_mean: PerModality::from_array(per_modality.map(|rows| mean_of(&rows))),
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

fn note_token(note: &diag_core::cohort::ClinicalNote, position: usize) -> &str {
    &note.tokens()[position]
}
