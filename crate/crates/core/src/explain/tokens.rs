//! Per-token contributions to a text-model logit.

use serde::{Deserialize, Serialize};

use crate::cohort::{ClinicalNote, DiagnosisLabel};
use crate::models::TextModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenWeight {
    pub token: String,
    pub position: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenAttribution {
    pub target_class: DiagnosisLabel,
    /// One entry per document token, in document order.
    pub tokens: Vec<TokenWeight>,
    pub bias: f64,
    pub logit: f64,
}

impl TokenAttribution {
    /// Token weights sorted descending, ties in document order.
    pub fn top(&self, k: usize) -> Vec<&TokenWeight> {
        let mut v: Vec<&TokenWeight> = self.tokens.iter().collect();
        v.sort_by(|a, b| b.weight.total_cmp(&a.weight));
        v.truncate(k);
        v
    }
}

/// The model's logit is linear in the summed embedding, so each token
/// contributes `class_weights[target] . embedding[token]` exactly.
pub fn token_attribution(
    model: &TextModel,
    note: &ClinicalNote,
    target: DiagnosisLabel,
) -> TokenAttribution {
    let c = target.code();
    let head = model.class_weight_row(c);
    let tokens = note
        .tokens()
        .iter()
        .enumerate()
        .map(|(position, token)| {
            let weight = model.vocabulary().get(token).map_or(0.0, |i| {
                head.iter()
                    .zip(model.embedding_row(i))
                    .map(|(w, e)| w * e)
                    .sum()
            });
            TokenWeight {
                token: token.clone(),
                position,
                weight,
            }
        })
        .collect();
    TokenAttribution {
        target_class: target,
        tokens,
        bias: model.bias()[c],
        logit: model.logits(note.tokens())[c],
    }
}
