//! Note classifier: a document is the sum of its tokens' embedding rows and
//! a linear softmax head reads that sum. Embeddings and head train jointly.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::optim::{EarlyStop, Momentum};
use super::{
    holdout_split, labels_of, log_priors, missing, softmax, ClassDistribution, ModelError,
};
use crate::artifact::{ArtifactError, Container, SectionWriter};
use crate::cohort::{ClinicalNote, DiagnosisLabel, Modality, PatientRecord, N_CLASSES};

const KIND: &str = "text-embedding-sum";
const MIN_COVERAGE: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Sorted token list; duplicates are dropped.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = tokens.into_iter().collect();
        tokens.sort();
        tokens.dedup();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, index }
    }

    /// Tokens occurring at least `min_count` times across `docs`.
    pub fn build(docs: &[&[String]], min_count: usize) -> Result<Self, ModelError> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for doc in docs {
            for t in doc.iter() {
                *counts.entry(t.as_str()).or_default() += 1;
            }
        }
        let vocab = Self::from_tokens(
            counts
                .into_iter()
                .filter(|&(_, c)| c >= min_count)
                .map(|(t, _)| t.to_string()),
        );
        if vocab.is_empty() {
            return Err(ModelError::EmptyVocabulary { min_count });
        }
        let covered = docs
            .iter()
            .filter(|d| d.iter().any(|t| vocab.get(t).is_some()))
            .count();
        if (covered as f64) < MIN_COVERAGE * docs.len() as f64 {
            return Err(ModelError::LowVocabularyCoverage {
                covered,
                total: docs.len(),
            });
        }
        Ok(vocab)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextParams {
    pub embedding_dim: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Share of the training records held out for early stopping; 0 trains
    /// for `max_epochs` without a holdout.
    pub holdout_fraction: f64,
    pub min_token_count: usize,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for TextParams {
    fn default() -> Self {
        Self {
            embedding_dim: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            holdout_fraction: 0.15,
            min_token_count: 2,
            init_std: 0.1,
            seed: 0,
        }
    }
}

impl TextParams {
    fn validate(&self) -> Result<(), ModelError> {
        let ok = self.embedding_dim > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.batch_size > 0
            && self.max_epochs > 0
            && self.patience > 0
            && (0.0..0.5).contains(&self.holdout_fraction)
            && self.min_token_count > 0
            && self.init_std >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidHyperparams(format!("{self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextGradients {
    pub embeddings: Vec<f64>,
    pub class_weights: Vec<f64>,
    pub bias: [f64; N_CLASSES],
}

impl TextGradients {
    /// Tensors in the order of [`TextModel::parameters`].
    pub fn tensors(&self) -> [&[f64]; 3] {
        [&self.embeddings, &self.class_weights, &self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextModel {
    vocab: Vocabulary,
    dim: usize,
    /// `|V| x dim`, row per vocabulary index.
    embeddings: Vec<f64>,
    /// `3 x dim`, row per class.
    class_weights: Vec<f64>,
    bias: [f64; N_CLASSES],
}

impl TextModel {
    pub fn from_parts(
        vocab: Vocabulary,
        dim: usize,
        embeddings: Vec<f64>,
        class_weights: Vec<f64>,
        bias: [f64; N_CLASSES],
    ) -> Result<Self, ModelError> {
        if embeddings.len() != vocab.len() * dim || class_weights.len() != N_CLASSES * dim {
            return Err(ModelError::ShapeMismatch(format!(
                "embeddings {} and class weights {} do not fit |V|={} d={dim}",
                embeddings.len(),
                class_weights.len(),
                vocab.len()
            )));
        }
        Ok(Self {
            vocab,
            dim,
            embeddings,
            class_weights,
            bias,
        })
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bias(&self) -> [f64; N_CLASSES] {
        self.bias
    }

    pub fn embedding_row(&self, index: usize) -> &[f64] {
        &self.embeddings[index * self.dim..(index + 1) * self.dim]
    }

    pub fn class_weight_row(&self, class: usize) -> &[f64] {
        &self.class_weights[class * self.dim..(class + 1) * self.dim]
    }

    /// Trainable tensors: embedding table, class weights, bias.
    pub fn parameters(&self) -> [&[f64]; 3] {
        [&self.embeddings, &self.class_weights, &self.bias]
    }

    pub fn parameters_mut(&mut self) -> [&mut [f64]; 3] {
        [
            &mut self.embeddings,
            &mut self.class_weights,
            &mut self.bias,
        ]
    }

    /// Vocabulary indices of the in-vocabulary tokens, in document order.
    pub fn indices(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().filter_map(|t| self.vocab.get(t)).collect()
    }

    /// Sum of embedding rows. Rows are added in index order, so any
    /// permutation of the document gives a bitwise-identical vector.
    fn embed_indices(&self, indices: &[usize]) -> Vec<f64> {
        let mut sorted = indices.to_vec();
        sorted.sort_unstable();
        let mut e = vec![0.0; self.dim];
        for &i in &sorted {
            for (acc, v) in e.iter_mut().zip(self.embedding_row(i)) {
                *acc += v;
            }
        }
        e
    }

    pub fn embed_tokens(&self, tokens: &[String]) -> Vec<f64> {
        self.embed_indices(&self.indices(tokens))
    }

    pub fn logits_from_embedding(&self, e: &[f64]) -> [f64; N_CLASSES] {
        std::array::from_fn(|c| {
            self.bias[c]
                + self
                    .class_weight_row(c)
                    .iter()
                    .zip(e)
                    .map(|(w, x)| w * x)
                    .sum::<f64>()
        })
    }

    pub fn logits(&self, tokens: &[String]) -> [f64; N_CLASSES] {
        self.logits_from_embedding(&self.embed_tokens(tokens))
    }

    pub fn predict_tokens(&self, tokens: &[String]) -> ClassDistribution {
        ClassDistribution::from_logits(&self.logits(tokens))
    }

    pub fn predict_proba(&self, note: &ClinicalNote) -> ClassDistribution {
        self.predict_tokens(note.tokens())
    }

    /// Mean cross-entropy over `docs` (vocabulary indices) and its gradient.
    pub fn loss_and_grad(
        &self,
        docs: &[Vec<usize>],
        labels: &[DiagnosisLabel],
    ) -> (f64, TextGradients) {
        let d = self.dim;
        let mut g = TextGradients {
            embeddings: vec![0.0; self.embeddings.len()],
            class_weights: vec![0.0; self.class_weights.len()],
            bias: [0.0; N_CLASSES],
        };
        let mut loss = 0.0;
        let scale = 1.0 / docs.len() as f64;
        for (doc, label) in docs.iter().zip(labels) {
            let e = self.embed_indices(doc);
            let p = softmax(&self.logits_from_embedding(&e));
            loss -= p[label.code()].ln();
            let mut de = vec![0.0; d];
            for c in 0..N_CLASSES {
                let delta = (p[c] - f64::from(u8::from(c == label.code()))) * scale;
                g.bias[c] += delta;
                let wrow = self.class_weight_row(c);
                let grow = &mut g.class_weights[c * d..(c + 1) * d];
                for j in 0..d {
                    grow[j] += delta * e[j];
                    de[j] += delta * wrow[j];
                }
            }
            for &t in doc {
                for (acc, v) in g.embeddings[t * d..(t + 1) * d].iter_mut().zip(&de) {
                    *acc += v;
                }
            }
        }
        (loss * scale, g)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(KIND);
        let mut w = SectionWriter::new();
        w.usize(self.vocab.len());
        for t in self.vocab.tokens() {
            w.str(t);
        }
        c.push("vocabulary", w);
        let mut w = SectionWriter::new();
        w.usize(self.dim)
            .f64s(&self.embeddings)
            .f64s(&self.class_weights)
            .f64s(&self.bias);
        c.push("weights", w);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ArtifactError> {
        c.expect_kind(KIND)?;
        let mut r = c.section("vocabulary")?;
        let n = r.usize()?;
        let tokens = (0..n).map(|_| r.str()).collect::<Result<Vec<_>, _>>()?;
        let vocab = Vocabulary::from_tokens(tokens);
        if vocab.len() != n {
            return Err(ArtifactError::Invalid("duplicate vocabulary tokens".into()));
        }
        let mut r = c.section("weights")?;
        let dim = r.usize()?;
        let embeddings = r.f64s_exact(n * dim)?;
        let class_weights = r.f64s_exact(N_CLASSES * dim)?;
        let bias = r.f64s_exact(N_CLASSES)?;
        Ok(Self {
            vocab,
            dim,
            embeddings,
            class_weights,
            bias: [bias[0], bias[1], bias[2]],
        })
    }
}

fn note_tokens<'a>(r: &'a PatientRecord) -> Result<&'a [String], ModelError> {
    r.note
        .as_ref()
        .map(ClinicalNote::tokens)
        .ok_or_else(|| missing(r, Modality::Text))
}

/// Trains on `train`, holding out a stratified share for early stopping and
/// restoring the parameters of the best holdout epoch.
pub fn train_text_model(
    train: &[&PatientRecord],
    params: &TextParams,
) -> Result<TextModel, ModelError> {
    params.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    log_priors(&labels_of(train)?)?;
    let (fit, hold) = if params.holdout_fraction > 0.0 {
        holdout_split(train, params.holdout_fraction, params.seed)?
    } else {
        (train.to_vec(), Vec::new())
    };
    let fit_labels = labels_of(&fit)?;
    let fit_docs = fit
        .iter()
        .map(|r| note_tokens(r))
        .collect::<Result<Vec<_>, _>>()?;
    let vocab = Vocabulary::build(&fit_docs, params.min_token_count)?;

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let dim = params.embedding_dim;
    let init = Normal::new(0.0, params.init_std).expect("finite std");
    let embeddings = (0..vocab.len() * dim)
        .map(|_| init.sample(&mut rng))
        .collect();
    let class_weights = (0..N_CLASSES * dim)
        .map(|_| init.sample(&mut rng))
        .collect();
    let mut model = TextModel::from_parts(
        vocab,
        dim,
        embeddings,
        class_weights,
        log_priors(&fit_labels)?,
    )?;

    let fit_idx: Vec<Vec<usize>> = fit_docs.iter().map(|d| model.indices(d)).collect();
    let hold_labels = labels_of(&hold)?;
    let hold_idx: Vec<Vec<usize>> = hold
        .iter()
        .map(|r| note_tokens(r).map(|d| model.indices(d)))
        .collect::<Result<_, _>>()?;

    let shapes = model.parameters().map(<[f64]>::len);
    let mut opt = Momentum::new(params.learning_rate, params.momentum, &shapes);
    let mut stop = EarlyStop::new(params.patience);
    let mut best = model.clone();
    let mut last_finite = None;
    let mut order: Vec<usize> = (0..fit_idx.len()).collect();
    for epoch in 0..params.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size) {
            let docs: Vec<Vec<usize>> = batch.iter().map(|&i| fit_idx[i].clone()).collect();
            let labels: Vec<DiagnosisLabel> = batch.iter().map(|&i| fit_labels[i]).collect();
            let (loss, g) = model.loss_and_grad(&docs, &labels);
            epoch_loss += loss * batch.len() as f64;
            let mut ps = model.parameters_mut();
            opt.step(&mut ps, &g.tensors());
        }
        let finite = epoch_loss.is_finite()
            && model
                .parameters()
                .iter()
                .all(|t| t.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(ModelError::Diverged {
                epoch,
                last_finite_epoch: last_finite,
            });
        }
        last_finite = Some(epoch);
        if !hold_idx.is_empty() {
            let (val_loss, _) = model.loss_and_grad(&hold_idx, &hold_labels);
            let (improved, should_stop) = stop.observe(epoch, val_loss);
            if improved {
                best = model.clone();
            }
            if should_stop {
                break;
            }
        }
    }
    Ok(if hold_idx.is_empty() { model } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic_cohort, Subset, SyntheticConfig};
    use crate::models::evaluate;
    use proptest::prelude::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn micro() -> TextModel {
        let vocab = Vocabulary::from_tokens(["a".to_string(), "b".to_string()]);
        TextModel::from_parts(
            vocab,
            2,
            vec![1.0, 0.0, 0.5, -1.0],
            vec![1.0, 0.0, 0.0, 1.0, -1.0, -1.0],
            [0.0, 0.1, 0.2],
        )
        .unwrap()
    }

    #[test]
    fn hand_set_micro_model() {
        // "a b a": e = 2*(1,0) + (0.5,-1) = (2.5,-1)
        // logits = (2.5, -1 + 0.1, -1.5 + 0.2) = (2.5, -0.9, -1.3)
        let p = micro().predict_tokens(&toks("a b a")).probs();
        let z = [2.5f64, -0.9, -1.3];
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        for k in 0..3 {
            assert!((p[k] - z[k].exp() / s).abs() < 1e-15);
        }
    }

    #[test]
    fn oov_document_predicts_softmax_of_bias() {
        let m = micro();
        let p = m.predict_tokens(&toks("zzz qqq")).probs();
        assert_eq!(p, softmax(&m.bias()));
    }

    #[test]
    fn separable_vocabulary_is_learned() {
        let words = ["alpha", "beta", "gamma"];
        let mut records = Vec::new();
        for i in 0..90 {
            let k = i % 3;
            let text = format!(
                "the patient {} report {}",
                words[k],
                ["x", "y", "z"][(i / 3) % 3]
            );
            records.push(PatientRecord {
                card_id: format!("{i:03}"),
                indicators: None,
                note: Some(ClinicalNote::new(text).unwrap()),
                image: None,
                label: DiagnosisLabel::from_code(k),
            });
        }
        let (train, val): (Vec<&PatientRecord>, Vec<&PatientRecord>) =
            records.iter().partition(|r| r.card_id.as_str() < "060");
        let m = train_text_model(
            &train,
            &TextParams {
                max_epochs: 60,
                ..Default::default()
            },
        )
        .unwrap();
        let metrics = evaluate(|r| Ok(m.predict_proba(r.note.as_ref().unwrap())), &val).unwrap();
        assert_eq!(metrics.accuracy, 1.0);
    }

    #[test]
    fn empty_vocabulary_is_rejected() {
        let records: Vec<PatientRecord> = (0..6)
            .map(|i| PatientRecord {
                card_id: i.to_string(),
                indicators: None,
                note: Some(ClinicalNote::new(format!("unique{i}")).unwrap()),
                image: None,
                label: DiagnosisLabel::from_code(i % 2),
            })
            .collect();
        let refs: Vec<&PatientRecord> = records.iter().collect();
        let params = TextParams {
            holdout_fraction: 0.0,
            ..Default::default()
        };
        assert!(matches!(
            train_text_model(&refs, &params),
            Err(ModelError::EmptyVocabulary { .. })
        ));
    }

    #[test]
    fn artifact_round_trip_is_exact() {
        let (ds, _) = generate_synthetic_cohort(&SyntheticConfig {
            n_patients: 60,
            ..Default::default()
        })
        .unwrap();
        let train = ds.subset(Subset::Train);
        let m = train_text_model(
            &train,
            &TextParams {
                max_epochs: 3,
                ..Default::default()
            },
        )
        .unwrap();
        let back = TextModel::from_container(
            &Container::from_bytes(&m.to_container().to_bytes()).unwrap(),
        )
        .unwrap();
        assert_eq!(back, m);
    }

    fn rel_error(a: &[f64], b: &[f64]) -> f64 {
        let diff = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-12)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let init = rand_distr::Normal::new(0.0, 0.5).unwrap();
        let (v, d) = (5, 3);
        let vocab = Vocabulary::from_tokens((0..v).map(|i| format!("t{i}")));
        let mut m = TextModel::from_parts(
            vocab,
            d,
            (0..v * d).map(|_| init.sample(&mut rng)).collect(),
            (0..3 * d).map(|_| init.sample(&mut rng)).collect(),
            [0.1, -0.2, 0.05],
        )
        .unwrap();
        let docs = vec![vec![0, 1, 1], vec![2, 4], vec![3], vec![0, 2, 3, 4]];
        use DiagnosisLabel::*;
        let labels = [Normal, Herniated, Bulging, Herniated];
        let (_, analytic) = m.loss_and_grad(&docs, &labels);
        let eps = 1e-4;
        for t in 0..3 {
            let n = m.parameters()[t].len();
            let mut numeric = vec![0.0; n];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = m.parameters()[t][i];
                m.parameters_mut()[t][i] = orig + eps;
                let up = m.loss_and_grad(&docs, &labels).0;
                m.parameters_mut()[t][i] = orig - eps;
                let down = m.loss_and_grad(&docs, &labels).0;
                m.parameters_mut()[t][i] = orig;
                *slot = (up - down) / (2.0 * eps);
            }
            let err = rel_error(analytic.tensors()[t], &numeric);
            assert!(err <= 1e-4, "tensor {t}: relative error {err}");
        }
    }

    proptest! {
        #[test]
        fn token_order_does_not_matter(seed in 0u64..500, perm_seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = Normal::new(0.0, 1.0).unwrap();
            let vocab = Vocabulary::from_tokens((0..6).map(|i| format!("w{i}")));
            let m = TextModel::from_parts(
                vocab,
                4,
                (0..24).map(|_| init.sample(&mut rng)).collect(),
                (0..12).map(|_| init.sample(&mut rng)).collect(),
                [0.0; 3],
            ).unwrap();
            let mut doc: Vec<String> = (0..12).map(|i| format!("w{}", (i * 7 + seed as usize) % 8)).collect();
            let before = (m.embed_tokens(&doc), m.predict_tokens(&doc));
            doc.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let after = (m.embed_tokens(&doc), m.predict_tokens(&doc));
            prop_assert_eq!(before.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            after.0.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(before.1.probs().map(f64::to_bits), after.1.probs().map(f64::to_bits));
        }
    }
}
