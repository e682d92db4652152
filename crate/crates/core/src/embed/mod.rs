//! Per-modality and fusion embeddings and their 2-D t-SNE projections.

mod tsne;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{ModalityMask, PatientRecord};
use crate::fusion::ModalityWeights;
use crate::models::{ModelError, ModelSet};

pub use tsne::{
    conditional_affinities, joint_probabilities, squared_distances, tsne, KlCheckpoint, TsneParams,
    TsneResult,
};

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("t-SNE needs at least 5 points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid t-SNE parameters: {0}")]
    InvalidParams(String),
    #[error("degenerate geometry: all input vectors are identical")]
    DegenerateGeometry,
    #[error("non-finite values in t-SNE input or iterate")]
    NonFinite,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{space} projection: {source}")]
    Space {
        space: EmbeddingSpace,
        #[source]
        source: Box<EmbedError>,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSpace {
    Indicator,
    Text,
    Image,
    Fusion,
}

impl EmbeddingSpace {
    pub const ALL: [EmbeddingSpace; 4] = [Self::Indicator, Self::Text, Self::Image, Self::Fusion];

    pub fn name(self) -> &'static str {
        match self {
            Self::Indicator => "indicator",
            Self::Text => "text",
            Self::Image => "image",
            Self::Fusion => "fusion",
        }
    }
}

impl fmt::Display for EmbeddingSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbeddingSpace {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| format!("unknown embedding space {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientEmbedding {
    pub card_id: String,
    /// Absent modalities have all-zero vectors.
    pub mask: ModalityMask,
    pub indicator: Vec<f64>,
    pub text: Vec<f64>,
    pub image: Vec<f64>,
    /// The three blocks above, each scaled by its modality weight.
    pub fusion: Vec<f64>,
}

impl PatientEmbedding {
    /// Unweighted concatenation, the feature-level baseline's input.
    pub fn concatenated(&self) -> Vec<f64> {
        [&self.indicator[..], &self.text, &self.image].concat()
    }

    pub fn space(&self, space: EmbeddingSpace) -> &[f64] {
        match space {
            EmbeddingSpace::Indicator => &self.indicator,
            EmbeddingSpace::Text => &self.text,
            EmbeddingSpace::Image => &self.image,
            EmbeddingSpace::Fusion => &self.fusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    pub weights: ModalityWeights,
    /// Block widths for indicator, text and image.
    pub dims: [usize; 3],
    pub rows: Vec<PatientEmbedding>,
}

impl EmbeddingSet {
    pub fn vectors(&self, space: EmbeddingSpace) -> Vec<Vec<f64>> {
        self.rows.iter().map(|r| r.space(space).to_vec()).collect()
    }
}

pub fn extract_embeddings(
    models: &ModelSet,
    weights: &ModalityWeights,
    records: &[&PatientRecord],
) -> Result<EmbeddingSet, ModelError> {
    let dims = [
        models.indicator.n_features(),
        models.text.dim(),
        models.image.shape().hidden,
    ];
    let w = weights.as_array();
    let rows = records
        .iter()
        .map(|r| {
            let indicator = match &r.indicators {
                Some(v) => models.indicator.standardizer().transform(&v.features()),
                None => vec![0.0; dims[0]],
            };
            let text = match &r.note {
                Some(n) => models.text.embed_tokens(n.tokens()),
                None => vec![0.0; dims[1]],
            };
            let image = match &r.image {
                Some(im) => models.image.forward(im.pixels())?.penultimate().to_vec(),
                None => vec![0.0; dims[2]],
            };
            let fusion = [(&indicator, w[0]), (&text, w[1]), (&image, w[2])]
                .iter()
                .flat_map(|(v, wm)| v.iter().map(move |x| wm * x))
                .collect();
            Ok(PatientEmbedding {
                card_id: r.card_id.clone(),
                mask: r.mask(),
                indicator,
                text,
                image,
                fusion,
            })
        })
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(EmbeddingSet {
        weights: *weights,
        dims,
        rows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub card_id: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceProjection {
    pub points: Vec<ProjectedPoint>,
    pub kl_trace: Vec<KlCheckpoint>,
    pub final_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub spaces: BTreeMap<EmbeddingSpace, SpaceProjection>,
    pub params: TsneParams,
}

impl ProjectionSet {
    pub fn space(&self, space: EmbeddingSpace) -> Option<&SpaceProjection> {
        self.spaces.get(&space)
    }
}

/// Projects the four spaces independently with the same parameters and seed,
/// one thread per space.
pub fn project_all(
    embeddings: &EmbeddingSet,
    params: &TsneParams,
) -> Result<ProjectionSet, EmbedError> {
    let results: Vec<(EmbeddingSpace, Result<TsneResult, EmbedError>)> = std::thread::scope(|s| {
        let handles: Vec<_> = EmbeddingSpace::ALL
            .into_iter()
            .map(|space| {
                let vectors = embeddings.vectors(space);
                (space, s.spawn(move || tsne(&vectors, params)))
            })
            .collect();
        handles
            .into_iter()
            .map(|(space, h)| (space, h.join().expect("t-SNE thread panicked")))
            .collect()
    });
    let mut spaces = BTreeMap::new();
    for (space, result) in results {
        let r = result.map_err(|e| EmbedError::Space {
            space,
            source: Box::new(e),
        })?;
        let points = embeddings
            .rows
            .iter()
            .zip(&r.coords)
            .map(|(row, c)| ProjectedPoint {
                card_id: row.card_id.clone(),
                x: c[0],
                y: c[1],
            })
            .collect();
        spaces.insert(
            space,
            SpaceProjection {
                points,
                kl_trace: r.kl_trace,
                final_kl: r.final_kl,
            },
        );
    }
    Ok(ProjectionSet {
        spaces,
        params: params.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_synthetic_cohort, Subset, SyntheticConfig};
    use crate::models::{
        train_indicator_model, BoostParams, ConvNetShape, ImageModel, TextModel, Vocabulary,
    };

    fn tiny_models(records: &[&PatientRecord]) -> ModelSet {
        let indicator = train_indicator_model(
            records,
            &BoostParams {
                n_trees: 3,
                ..BoostParams::default()
            },
        )
        .unwrap();
        let vocab =
            Vocabulary::from_tokens(["disc".to_string(), "pain".to_string(), "normal".to_string()]);
        let dim = 4;
        let emb: Vec<f64> = (0..vocab.len() * dim)
            .map(|i| (i as f64 * 0.37).sin())
            .collect();
        let text = TextModel::from_parts(vocab, dim, emb, vec![0.1; 3 * dim], [0.0; 3]).unwrap();
        let shape = ConvNetShape {
            side: 64,
            conv1: 2,
            conv2: 2,
            hidden: 5,
        };
        let image = ImageModel::initialize(shape, [0.0; 3], 1).unwrap();
        ModelSet {
            indicator,
            text,
            image,
        }
    }

    fn cohort() -> crate::cohort::CohortDataset {
        let cfg = SyntheticConfig {
            n_patients: 40,
            ..SyntheticConfig::default()
        };
        generate_synthetic_cohort(&cfg).unwrap().0
    }

    #[test]
    fn fusion_blocks_are_weighted_copies() {
        let ds = cohort();
        let train = ds.subset(Subset::Train);
        let models = tiny_models(&train);
        let w = ModalityWeights::new([0.5, 0.3, 0.2]).unwrap();
        let records: Vec<&PatientRecord> = ds.records().iter().collect();
        let set = extract_embeddings(&models, &w, &records).unwrap();
        assert_eq!(set.dims, [37, 4, 5]);
        for r in &set.rows {
            assert_eq!(r.fusion.len(), 46);
            let blocks = [(&r.indicator, 0.5), (&r.text, 0.3), (&r.image, 0.2)];
            let expected: Vec<f64> = blocks
                .iter()
                .flat_map(|(v, wm)| v.iter().map(move |x| wm * x))
                .collect();
            assert_eq!(r.fusion, expected);
        }
        let vertex = extract_embeddings(
            &models,
            &ModalityWeights::new([1.0, 0.0, 0.0]).unwrap(),
            &records,
        )
        .unwrap();
        for r in &vertex.rows {
            assert!(r.fusion[37..].iter().all(|v| *v == 0.0));
        }
        assert_eq!(set, extract_embeddings(&models, &w, &records).unwrap());
    }

    #[test]
    fn identical_notes_share_text_vectors_and_missing_blocks_are_zero() {
        let ds = cohort();
        let train = ds.subset(Subset::Train);
        let models = tiny_models(&train);
        let mut a = ds.records()[0].clone();
        let mut b = ds.records()[1].clone();
        b.note = a.note.clone();
        a.image = None;
        let set = extract_embeddings(&models, &ModalityWeights::uniform(), &[&a, &b]).unwrap();
        assert_eq!(set.rows[0].text, set.rows[1].text);
        assert!(set.rows[0].image.iter().all(|v| *v == 0.0));
        assert!(!set.rows[0].mask.0[2]);
    }

    #[test]
    fn projections_cover_every_space_in_card_order() {
        let ds = cohort();
        let train = ds.subset(Subset::Train);
        let models = tiny_models(&train);
        let records: Vec<&PatientRecord> = ds.records().iter().collect();
        let set = extract_embeddings(&models, &ModalityWeights::uniform(), &records).unwrap();
        let params = TsneParams {
            perplexity: 5.0,
            iterations: 250,
            ..TsneParams::default()
        };
        let p = project_all(&set, &params).unwrap();
        assert_eq!(p.spaces.len(), 4);
        for sp in p.spaces.values() {
            let ids: Vec<&str> = sp.points.iter().map(|q| q.card_id.as_str()).collect();
            let want: Vec<&str> = records.iter().map(|r| r.card_id.as_str()).collect();
            assert_eq!(ids, want);
        }
        assert_eq!(p, project_all(&set, &params).unwrap());
        let json = serde_json::to_value(&p).unwrap();
        assert!(json["spaces"]["fusion"]["points"].is_array());
    }
}
