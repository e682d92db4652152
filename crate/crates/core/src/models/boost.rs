//! Multiclass gradient boosting with a softmax link: each round fits one
//! regression tree per class to the cross-entropy gradient, with Newton leaf
//! values `-G / (H + lambda)`.

use serde::{Deserialize, Serialize};

use super::{labels_of, log_priors, missing, softmax, ClassDistribution, ModelError};
use crate::artifact::{ArtifactError, Container, SectionWriter};
use crate::cohort::{DiagnosisLabel, IndicatorVector, Modality, PatientRecord, N_CLASSES};

const KIND: &str = "indicator-gbdt";
/// Halvings tried before a round that raises training loss is dropped.
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Minimum hessian mass in each child of a split.
    pub min_child_weight: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 3,
            learning_rate: 0.1,
            lambda: 1.0,
            min_child_weight: 1e-3,
        }
    }
}

impl BoostParams {
    fn validate(&self) -> Result<(), ModelError> {
        let ok = self.n_trees > 0
            && self.max_depth > 0
            && self.learning_rate > 0.0
            && self.learning_rate.is_finite()
            && self.lambda >= 0.0
            && self.min_child_weight >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(ModelError::InvalidHyperparams(format!("{self:?}")))
        }
    }
}

/// Z-score statistics from the training rows. Constant columns keep unit
/// scale so they map to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows.first().map_or(0, Vec::len);
        let n = rows.len() as f64;
        let mean: Vec<f64> = (0..d)
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n)
            .collect();
        let std = (0..d)
            .map(|j| {
                let var = rows.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n;
                let s = var.sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Node {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[feature] <= threshold { left } else { right },
            }
        }
    }

    fn scale(&mut self, factor: f64) {
        for n in &mut self.nodes {
            if let Node::Leaf(v) = n {
                *v *= factor;
            }
        }
    }

    fn encode(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.nodes.len() * 5);
        for n in &self.nodes {
            match *n {
                Node::Leaf(v) => out.extend([0.0, v, 0.0, 0.0, 0.0]),
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => out.extend([1.0, feature as f64, threshold, left as f64, right as f64]),
            }
        }
        out
    }

    fn decode(flat: &[f64], n_features: usize) -> Result<Self, ArtifactError> {
        if flat.is_empty() || flat.len() % 5 != 0 {
            return Err(ArtifactError::Invalid("tree encoding".into()));
        }
        let n_nodes = flat.len() / 5;
        let index = |v: f64, bound: usize| -> Result<usize, ArtifactError> {
            let i = v as usize;
            if v >= 0.0 && v.fract() == 0.0 && i < bound {
                Ok(i)
            } else {
                Err(ArtifactError::Invalid(format!("tree index {v}")))
            }
        };
        let nodes = flat
            .chunks_exact(5)
            .enumerate()
            .map(|(at, c)| {
                if c[0] == 0.0 {
                    Ok(Node::Leaf(c[1]))
                } else {
                    let (left, right) = (index(c[3], n_nodes)?, index(c[4], n_nodes)?);
                    // children always follow their parent, so traversal terminates
                    if left <= at || right <= at {
                        return Err(ArtifactError::Invalid("tree cycle".into()));
                    }
                    Ok(Node::Split {
                        feature: index(c[1], n_features)?,
                        threshold: c[2],
                        left,
                        right,
                    })
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { nodes })
    }
}

/// Level-wise exact greedy tree growth over presorted columns.
fn build_tree(
    x: &[Vec<f64>],
    sorted: &[Vec<usize>],
    grad: &[f64],
    hess: &[f64],
    params: &BoostParams,
) -> Tree {
    let n = grad.len();
    let lambda = params.lambda;
    let score = |g: f64, h: f64| g * g / (h + lambda);
    let mut nodes = vec![Node::Leaf(0.0)];
    let mut stats = vec![(grad.iter().sum::<f64>(), hess.iter().sum::<f64>())];
    let mut node_of = vec![0usize; n];
    let mut frontier = vec![0usize];

    for _ in 0..params.max_depth {
        if frontier.is_empty() {
            break;
        }
        let mut slot = vec![usize::MAX; nodes.len()];
        for (s, &nd) in frontier.iter().enumerate() {
            slot[nd] = s;
        }
        let m = frontier.len();
        let mut best: Vec<Option<(f64, usize, f64)>> = vec![None; m];
        for (f, order) in sorted.iter().enumerate() {
            let mut gl = vec![0.0; m];
            let mut hl = vec![0.0; m];
            let mut last: Vec<Option<f64>> = vec![None; m];
            for &i in order {
                let s = slot[node_of[i]];
                if s == usize::MAX {
                    continue;
                }
                let v = x[i][f];
                if let Some(prev) = last[s] {
                    if v > prev {
                        let (g, h) = stats[frontier[s]];
                        let (gr, hr) = (g - gl[s], h - hl[s]);
                        if hl[s] >= params.min_child_weight && hr >= params.min_child_weight {
                            let gain = score(gl[s], hl[s]) + score(gr, hr) - score(g, h);
                            let better = match best[s] {
                                None => gain > 1e-12,
                                Some((b, _, _)) => gain > b,
                            };
                            if better {
                                let mut thr = 0.5 * (prev + v);
                                if thr >= v {
                                    thr = prev;
                                }
                                best[s] = Some((gain, f, thr));
                            }
                        }
                    }
                }
                gl[s] += grad[i];
                hl[s] += hess[i];
                last[s] = Some(v);
            }
        }

        let mut next = Vec::new();
        let mut child_of = vec![None; nodes.len()];
        for (s, b) in best.iter().enumerate() {
            if let Some((_, feature, threshold)) = *b {
                let nd = frontier[s];
                let left = nodes.len();
                nodes.push(Node::Leaf(0.0));
                nodes.push(Node::Leaf(0.0));
                stats.push((0.0, 0.0));
                stats.push((0.0, 0.0));
                nodes[nd] = Node::Split {
                    feature,
                    threshold,
                    left,
                    right: left + 1,
                };
                child_of[nd] = Some((feature, threshold, left));
                next.push(left);
                next.push(left + 1);
            }
        }
        for i in 0..n {
            if let Some((feature, threshold, left)) = child_of[node_of[i]] {
                let c = if x[i][feature] <= threshold {
                    left
                } else {
                    left + 1
                };
                node_of[i] = c;
                stats[c].0 += grad[i];
                stats[c].1 += hess[i];
            }
        }
        frontier = next;
    }

    for (nd, node) in nodes.iter_mut().enumerate() {
        if let Node::Leaf(v) = node {
            let (g, h) = stats[nd];
            *v = -g / (h + lambda);
        }
    }
    Tree { nodes }
}

fn cross_entropy(scores: &[[f64; N_CLASSES]], labels: &[DiagnosisLabel]) -> f64 {
    scores
        .iter()
        .zip(labels)
        .map(|(s, l)| {
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - s[l.code()]
        })
        .sum::<f64>()
        / labels.len() as f64
}

/// Mean training cross-entropy before boosting and after each kept round.
pub type TrainingTrace = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorModel {
    params: BoostParams,
    standardizer: Standardizer,
    base: [f64; N_CLASSES],
    rounds: Vec<[Tree; N_CLASSES]>,
    trace: TrainingTrace,
}

impl IndicatorModel {
    /// Fits on raw feature rows of any fixed width.
    pub fn fit(
        rows: &[Vec<f64>],
        labels: &[DiagnosisLabel],
        params: &BoostParams,
    ) -> Result<Self, ModelError> {
        params.validate()?;
        if rows.len() != labels.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} rows for {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let base = log_priors(labels)?;
        let d = rows[0].len();
        if rows
            .iter()
            .any(|r| r.len() != d || r.iter().any(|v| !v.is_finite()))
        {
            return Err(ModelError::ShapeMismatch(
                "feature rows must share one width and be finite".into(),
            ));
        }
        let standardizer = Standardizer::fit(rows);
        let x: Vec<Vec<f64>> = rows.iter().map(|r| standardizer.transform(r)).collect();
        let sorted: Vec<Vec<usize>> = (0..d)
            .map(|f| {
                let mut idx: Vec<usize> = (0..x.len()).collect();
                idx.sort_by(|&a, &b| x[a][f].total_cmp(&x[b][f]).then(a.cmp(&b)));
                idx
            })
            .collect();

        let n = x.len();
        let mut scores = vec![base; n];
        let mut loss = cross_entropy(&scores, labels);
        let mut trace = vec![loss];
        let mut rounds = Vec::new();
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        for _ in 0..params.n_trees {
            let probs: Vec<[f64; N_CLASSES]> = scores.iter().map(softmax).collect();
            let trees: [Tree; N_CLASSES] = std::array::from_fn(|k| {
                for i in 0..n {
                    let p = probs[i][k];
                    let y = if labels[i].code() == k { 1.0 } else { 0.0 };
                    grad[i] = p - y;
                    hess[i] = (p * (1.0 - p)).max(1e-16);
                }
                let mut t = build_tree(&x, &sorted, &grad, &hess, params);
                t.scale(params.learning_rate);
                t
            });
            let delta: Vec<[f64; N_CLASSES]> = x
                .iter()
                .map(|xi| std::array::from_fn(|k| trees[k].predict(xi)))
                .collect();
            let mut factor = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let candidate: Vec<[f64; N_CLASSES]> = scores
                    .iter()
                    .zip(&delta)
                    .map(|(s, d)| std::array::from_fn(|k| s[k] + factor * d[k]))
                    .collect();
                let new_loss = cross_entropy(&candidate, labels);
                if new_loss <= loss {
                    accepted = Some((candidate, new_loss));
                    break;
                }
                factor *= 0.5;
            }
            let Some((candidate, new_loss)) = accepted else {
                break;
            };
            let mut trees = trees;
            if factor != 1.0 {
                for t in &mut trees {
                    t.scale(factor);
                }
            }
            scores = candidate;
            loss = new_loss;
            trace.push(loss);
            rounds.push(trees);
        }
        Ok(Self {
            params: params.clone(),
            standardizer,
            base,
            rounds,
            trace,
        })
    }

    pub fn params(&self) -> &BoostParams {
        &self.params
    }

    pub fn n_features(&self) -> usize {
        self.standardizer.mean.len()
    }

    pub fn n_rounds(&self) -> usize {
        self.rounds.len()
    }

    pub fn training_trace(&self) -> &[f64] {
        &self.trace
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.standardizer
    }

    /// Logits from the base score and the first `n_rounds` rounds.
    pub fn logits_truncated(
        &self,
        features: &[f64],
        n_rounds: usize,
    ) -> Result<[f64; N_CLASSES], ModelError> {
        if features.len() != self.n_features() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} features, got {}",
                self.n_features(),
                features.len()
            )));
        }
        let x = self.standardizer.transform(features);
        let mut s = self.base;
        for trees in self.rounds.iter().take(n_rounds) {
            for k in 0..N_CLASSES {
                s[k] += trees[k].predict(&x);
            }
        }
        Ok(s)
    }

    pub fn logits(&self, features: &[f64]) -> Result<[f64; N_CLASSES], ModelError> {
        self.logits_truncated(features, self.rounds.len())
    }

    pub fn predict_features(&self, features: &[f64]) -> Result<ClassDistribution, ModelError> {
        Ok(ClassDistribution::from_logits(&self.logits(features)?))
    }

    pub fn predict_proba(&self, x: &IndicatorVector) -> Result<ClassDistribution, ModelError> {
        self.predict_features(&x.features())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(KIND);
        let p = &self.params;
        let mut w = SectionWriter::new();
        w.usize(p.n_trees)
            .usize(p.max_depth)
            .f64(p.learning_rate)
            .f64(p.lambda)
            .f64(p.min_child_weight);
        c.push("params", w);
        let mut w = SectionWriter::new();
        w.f64s(&self.standardizer.mean).f64s(&self.standardizer.std);
        c.push("standardizer", w);
        let mut w = SectionWriter::new();
        w.f64s(&self.base)
            .f64s(&self.trace)
            .usize(self.rounds.len());
        for trees in &self.rounds {
            for t in trees {
                w.f64s(&t.encode());
            }
        }
        c.push("trees", w);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self, ArtifactError> {
        c.expect_kind(KIND)?;
        let mut r = c.section("params")?;
        let params = BoostParams {
            n_trees: r.usize()?,
            max_depth: r.usize()?,
            learning_rate: r.f64()?,
            lambda: r.f64()?,
            min_child_weight: r.f64()?,
        };
        let mut r = c.section("standardizer")?;
        let mean = r.f64s()?;
        let std = r.f64s_exact(mean.len())?;
        let d = mean.len();
        let mut r = c.section("trees")?;
        let base = r.f64s_exact(N_CLASSES)?;
        let trace = r.f64s()?;
        let n_rounds = r.usize()?;
        let mut rounds = Vec::new();
        for _ in 0..n_rounds {
            let trees = [
                Tree::decode(&r.f64s()?, d)?,
                Tree::decode(&r.f64s()?, d)?,
                Tree::decode(&r.f64s()?, d)?,
            ];
            rounds.push(trees);
        }
        Ok(Self {
            params,
            standardizer: Standardizer { mean, std },
            base: [base[0], base[1], base[2]],
            rounds,
            trace,
        })
    }
}

pub fn train_indicator_model(
    train: &[&PatientRecord],
    params: &BoostParams,
) -> Result<IndicatorModel, ModelError> {
    if train.is_empty() {
        return Err(ModelError::EmptyTrainingSet);
    }
    let rows = train
        .iter()
        .map(|r| {
            r.indicators
                .as_ref()
                .map(IndicatorVector::features)
                .ok_or_else(|| missing(r, Modality::Indicator))
        })
        .collect::<Result<Vec<_>, _>>()?;
    IndicatorModel::fit(&rows, &labels_of(train)?, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic_cohort, Subset, SyntheticConfig};
    use crate::models::evaluate;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quiet_cohort(n: usize, seed: u64) -> crate::cohort::CohortDataset {
        generate_synthetic_cohort(&SyntheticConfig {
            seed,
            n_patients: n,
            noise_level: 0.0,
            complementarity: 0.0,
            ..Default::default()
        })
        .unwrap()
        .0
    }

    #[test]
    fn overfits_noise_free_train_set() {
        let ds = quiet_cohort(50, 3);
        let all: Vec<&PatientRecord> = ds.records().iter().collect();
        let m = train_indicator_model(&all, &BoostParams::default()).unwrap();
        let metrics = evaluate(|r| m.predict_proba(r.indicators.as_ref().unwrap()), &all).unwrap();
        assert_eq!(metrics.accuracy, 1.0);
    }

    #[test]
    fn constant_features_predict_priors() {
        use DiagnosisLabel::*;
        let labels = [Normal, Normal, Herniated, Bulging, Bulging, Bulging];
        let rows = vec![vec![1.0, 2.0]; labels.len()];
        let m = IndicatorModel::fit(&rows, &labels, &BoostParams::default()).unwrap();
        let p = m.predict_features(&[1.0, 2.0]).unwrap().probs();
        for (got, want) in p.iter().zip([2.0 / 6.0, 1.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-9, "{p:?}");
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let rows = vec![vec![0.0], vec![1.0]];
        let labels = [DiagnosisLabel::Bulging; 2];
        assert!(matches!(
            IndicatorModel::fit(&rows, &labels, &BoostParams::default()),
            Err(ModelError::SingleClass(1))
        ));
    }

    #[test]
    fn feature_width_is_checked() {
        let ds = quiet_cohort(40, 1);
        let train = ds.subset(Subset::Train);
        let m = train_indicator_model(
            &train,
            &BoostParams {
                n_trees: 3,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(matches!(
            m.predict_features(&[0.0; 5]),
            Err(ModelError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn artifact_round_trip_is_exact() {
        let ds = quiet_cohort(60, 5);
        let train = ds.subset(Subset::Train);
        let m = train_indicator_model(
            &train,
            &BoostParams {
                n_trees: 10,
                ..Default::default()
            },
        )
        .unwrap();
        let bytes = m.to_container().to_bytes();
        let back = IndicatorModel::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        for r in ds.records() {
            let x = r.indicators.as_ref().unwrap();
            assert_eq!(m.predict_proba(x).unwrap(), back.predict_proba(x).unwrap());
        }
    }

    /// Independent recomputation of mean training cross-entropy from the
    /// model's own predictions, truncated after each round.
    fn replayed_losses(
        m: &IndicatorModel,
        rows: &[Vec<f64>],
        labels: &[DiagnosisLabel],
    ) -> Vec<f64> {
        (0..=m.n_rounds())
            .map(|t| {
                rows.iter()
                    .zip(labels)
                    .map(|(r, l)| {
                        let p = softmax(&m.logits_truncated(r, t).unwrap());
                        -p[l.code()].ln()
                    })
                    .sum::<f64>()
                    / rows.len() as f64
            })
            .collect()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn training_loss_never_increases(seed in 0u64..10_000, lr in 0.05f64..3.0, depth in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let labels: Vec<DiagnosisLabel> = rows
                .iter()
                .map(|r| {
                    let noisy = r[0] + 0.7 * r[1] + rng.random_range(-0.5..0.5);
                    DiagnosisLabel::ALL[if noisy < -0.4 { 0 } else if noisy < 0.4 { 1 } else { 2 }]
                })
                .collect();
            prop_assume!(log_priors(&labels).is_ok());
            let params = BoostParams { n_trees: 15, max_depth: depth, learning_rate: lr, ..Default::default() };
            let m = IndicatorModel::fit(&rows, &labels, &params).unwrap();
            let replay = replayed_losses(&m, &rows, &labels);
            for w in replay.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12, "{} -> {}", w[0], w[1]);
            }
            for (a, b) in replay.iter().zip(m.training_trace()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
