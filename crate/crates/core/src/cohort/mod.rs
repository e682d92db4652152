//! Patient data model, synthetic cohort generation, file ingestion and
//! stratified splitting.

mod io;
mod split;
mod summary;
mod synthetic;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use io::{
    load_cohort, read_cohort_dir, write_cohort, LoadedCohort, Manifest, IMAGES_DIR,
    INDICATORS_FILE, MANIFEST_FILE, NOTES_FILE,
};
pub use split::{kfold, kfold_labels, split_dataset, Fold};
pub use summary::{cohort_summary, AgeStats, CohortSummary};
pub use synthetic::{
    generate_synthetic_cohort, two_protrusion_scan, SignalBox, SyntheticConfig, SyntheticTruth,
    BLOB_LINE_X,
};

/// Number of diagnostic classes.
pub const N_CLASSES: usize = 3;
/// Number of indicator entries (age, blood glucose and 32 generic labs).
pub const N_INDICATORS: usize = 34;
/// Indicators plus the three folded-in demographics (gender, height, weight).
pub const N_FEATURES: usize = N_INDICATORS + 3;
pub const IMAGE_SIDE: usize = 64;
pub const MAX_TOKENS: usize = 512;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("degenerate prior: every class needs a positive prior, got {0:?}")]
    DegeneratePrior([f64; 3]),
    #[error("need at least {min} patients, got {got}")]
    TooFewPatients { min: usize, got: usize },
    #[error("invalid record {card_id}: {reason}")]
    InvalidRecord { card_id: String, reason: String },
    #[error("{path}:{line}: {reason}")]
    Malformed {
        path: String,
        line: u64,
        reason: String,
    },
    #[error("duplicate card_id {0}")]
    DuplicateCardId(String),
    #[error("class {label} has {count} members, cannot stratify into {needed} parts")]
    CannotStratify {
        label: DiagnosisLabel,
        count: usize,
        needed: usize,
    },
    #[error("invalid split ratio {0}, must be in (0, 1)")]
    InvalidRatio(f64),
    #[error("k = {k} folds invalid for {n} records")]
    InvalidFolds { k: usize, n: usize },
    #[error("empty dataset")]
    Empty,
    #[error("unlabeled record {0}")]
    Unlabeled(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CohortError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CohortError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

/// Diagnostic class. Serialized as the stable integer code 0/1/2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DiagnosisLabel {
    Normal,
    Herniated,
    Bulging,
}

impl DiagnosisLabel {
    pub const ALL: [DiagnosisLabel; N_CLASSES] = [
        DiagnosisLabel::Normal,
        DiagnosisLabel::Herniated,
        DiagnosisLabel::Bulging,
    ];

    pub fn code(self) -> usize {
        match self {
            DiagnosisLabel::Normal => 0,
            DiagnosisLabel::Herniated => 1,
            DiagnosisLabel::Bulging => 2,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            DiagnosisLabel::Normal => "normal",
            DiagnosisLabel::Herniated => "herniated",
            DiagnosisLabel::Bulging => "bulging",
        }
    }
}

impl fmt::Display for DiagnosisLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DiagnosisLabel {
    type Err = String;

    /// Accepts either the class name or its integer code.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if let Ok(code) = s.parse::<usize>() {
            return Self::from_code(code).ok_or_else(|| format!("unknown class code {code}"));
        }
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown class {s:?}"))
    }
}

impl Serialize for DiagnosisLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.code() as u8)
    }
}

impl<'de> Deserialize<'de> for DiagnosisLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let code = u8::deserialize(deserializer)?;
        DiagnosisLabel::from_code(code as usize)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid class code {code}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

impl Gender {
    /// Numeric encoding used when gender is a model feature.
    pub fn as_feature(self) -> f64 {
        match self {
            Gender::M => 1.0,
            Gender::F => 0.0,
        }
    }
}

/// The three data modalities, in their canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Indicator,
    Text,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Indicator, Modality::Text, Modality::Image];

    pub fn index(self) -> usize {
        match self {
            Modality::Indicator => 0,
            Modality::Text => 1,
            Modality::Image => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Indicator => "indicator",
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Modality::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown modality {s:?}"))
    }
}

/// Which modalities are present for one patient, indexed by [`Modality::index`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalityMask(pub [bool; 3]);

impl ModalityMask {
    pub const ALL_PRESENT: ModalityMask = ModalityMask([true; 3]);

    pub fn without(mut self, m: Modality) -> Self {
        self.0[m.index()] = false;
        self
    }

    pub fn is_present(&self, m: Modality) -> bool {
        self.0[m.index()]
    }

    pub fn present_count(&self) -> usize {
        self.0.iter().filter(|p| **p).count()
    }
}

/// Names of the 37 model features: the 34 indicators followed by the demographics.
pub fn feature_names() -> Vec<String> {
    let mut names = vec!["Age".to_string(), "Blood glucose".to_string()];
    names.extend((0..N_INDICATORS - 2).map(|i| format!("ind_{i:02}")));
    names.extend([
        "Gender".to_string(),
        "Height".to_string(),
        "Weight".to_string(),
    ]);
    names
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorVector {
    values: Vec<f64>,
    pub gender: Gender,
    /// Height in cm.
    pub height: f64,
    /// Weight in kg.
    pub weight: f64,
}

impl IndicatorVector {
    pub fn new(values: Vec<f64>, gender: Gender, height: f64, weight: f64) -> Result<Self, String> {
        if values.len() != N_INDICATORS {
            return Err(format!(
                "expected {N_INDICATORS} indicator values, got {}",
                values.len()
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(format!("indicator {i} is not finite"));
        }
        if !(18.0..=90.0).contains(&values[0]) {
            return Err(format!("age {} outside [18, 90]", values[0]));
        }
        if !height.is_finite() || !weight.is_finite() {
            return Err("height and weight must be finite".into());
        }
        Ok(Self {
            values,
            gender,
            height,
            weight,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn age(&self) -> f64 {
        self.values[0]
    }

    pub fn glucose(&self) -> f64 {
        self.values[1]
    }

    /// The 37-dimensional model feature vector (see [`feature_names`]).
    pub fn features(&self) -> Vec<f64> {
        let mut f = Vec::with_capacity(N_FEATURES);
        f.extend_from_slice(&self.values);
        f.push(self.gender.as_feature());
        f.push(self.height);
        f.push(self.weight);
        f
    }
}

/// Lowercase, split on runs of non-alphanumeric characters, drop empties.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClinicalNote {
    raw_text: String,
    tokens: Vec<String>,
}

impl ClinicalNote {
    pub fn new(raw_text: impl Into<String>) -> Result<Self, String> {
        let raw_text = raw_text.into();
        let tokens = tokenize(&raw_text);
        if tokens.is_empty() {
            return Err("note has no tokens".into());
        }
        if tokens.len() > MAX_TOKENS {
            return Err(format!(
                "note has {} tokens, limit is {MAX_TOKENS}",
                tokens.len()
            ));
        }
        Ok(Self { raw_text, tokens })
    }

    pub fn raw_text(&self) -> &str {
        &self.raw_text
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl Serialize for ClinicalNote {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.raw_text)
    }
}

impl<'de> Deserialize<'de> for ClinicalNote {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        ClinicalNote::new(text).map_err(serde::de::Error::custom)
    }
}

/// 64x64 grayscale image, row-major, intensities in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanImage {
    pixels: Vec<f64>,
}

impl ScanImage {
    pub fn new(pixels: Vec<f64>) -> Result<Self, String> {
        if pixels.len() != IMAGE_SIDE * IMAGE_SIDE {
            return Err(format!(
                "expected {} pixels, got {}",
                IMAGE_SIDE * IMAGE_SIDE,
                pixels.len()
            ));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err("pixel intensity outside [0, 1]".into());
        }
        Ok(Self { pixels })
    }

    pub fn zeros() -> Self {
        Self {
            pixels: vec![0.0; IMAGE_SIDE * IMAGE_SIDE],
        }
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * IMAGE_SIDE + x]
    }

    /// 8-bit quantization used by the PNG interchange format.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        Self::new(bytes.iter().map(|b| f64::from(*b) / 255.0).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRecord {
    pub card_id: String,
    pub indicators: Option<IndicatorVector>,
    pub note: Option<ClinicalNote>,
    pub image: Option<ScanImage>,
    pub label: Option<DiagnosisLabel>,
}

impl PatientRecord {
    pub fn mask(&self) -> ModalityMask {
        ModalityMask([
            self.indicators.is_some(),
            self.note.is_some(),
            self.image.is_some(),
        ])
    }

    pub fn require_label(&self) -> Result<DiagnosisLabel, CohortError> {
        self.label
            .ok_or_else(|| CohortError::Unlabeled(self.card_id.clone()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Train,
    Val,
}

/// Where a dataset came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Provenance {
    Synthetic {
        config: SyntheticConfig,
    },
    Files {
        indicators: String,
        notes: String,
        images: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortDataset {
    records: Vec<PatientRecord>,
    split: BTreeMap<String, Subset>,
    provenance: Provenance,
}

impl CohortDataset {
    /// Builds a dataset, checking card_id uniqueness. Every record starts in
    /// the training subset until a split is applied.
    pub fn new(records: Vec<PatientRecord>, provenance: Provenance) -> Result<Self, CohortError> {
        let mut split = BTreeMap::new();
        for r in &records {
            if split.insert(r.card_id.clone(), Subset::Train).is_some() {
                return Err(CohortError::DuplicateCardId(r.card_id.clone()));
            }
        }
        Ok(Self {
            records,
            split,
            provenance,
        })
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn split(&self) -> &BTreeMap<String, Subset> {
        &self.split
    }

    pub fn get(&self, card_id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.card_id == card_id)
    }

    pub fn position(&self, card_id: &str) -> Option<usize> {
        self.records.iter().position(|r| r.card_id == card_id)
    }

    pub fn subset_of(&self, card_id: &str) -> Option<Subset> {
        self.split.get(card_id).copied()
    }

    /// Assigns train/val from index lists produced by [`split_dataset`].
    pub fn apply_split(&mut self, train: &[usize], val: &[usize]) -> Result<(), CohortError> {
        let mut split = BTreeMap::new();
        for (indices, subset) in [(train, Subset::Train), (val, Subset::Val)] {
            for &i in indices {
                let r = self.records.get(i).ok_or(CohortError::InvalidFolds {
                    k: i,
                    n: self.records.len(),
                })?;
                if split.insert(r.card_id.clone(), subset).is_some() {
                    return Err(CohortError::DuplicateCardId(r.card_id.clone()));
                }
            }
        }
        self.set_split(split)
    }

    /// Replaces the split map; it must cover every record exactly once.
    pub fn set_split(&mut self, split: BTreeMap<String, Subset>) -> Result<(), CohortError> {
        if split.len() != self.records.len()
            || self.records.iter().any(|r| !split.contains_key(&r.card_id))
        {
            return Err(CohortError::InvalidConfig(
                "split must cover every record exactly once".into(),
            ));
        }
        self.split = split;
        Ok(())
    }

    pub fn indices_of(&self, subset: Subset) -> Vec<usize> {
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| self.split.get(&r.card_id) == Some(&subset))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn subset(&self, subset: Subset) -> Vec<&PatientRecord> {
        self.indices_of(subset)
            .into_iter()
            .map(|i| &self.records[i])
            .collect()
    }

    /// Labels for the given record indices; fails on any unlabeled record.
    pub fn labels_at(&self, indices: &[usize]) -> Result<Vec<DiagnosisLabel>, CohortError> {
        indices
            .iter()
            .map(|&i| self.records[i].require_label())
            .collect()
    }

    pub fn class_counts(&self, indices: &[usize]) -> [usize; N_CLASSES] {
        let mut counts = [0; N_CLASSES];
        for &i in indices {
            if let Some(l) = self.records[i].label {
                counts[l.code()] += 1;
            }
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_lowercases_and_splits() {
        assert_eq!(
            tokenize("C5/C6 disc  PROTRUSION, slightly-bulging."),
            vec!["c5", "c6", "disc", "protrusion", "slightly", "bulging"]
        );
        assert!(tokenize(" ,;. ").is_empty());
    }

    #[test]
    fn label_codes_are_stable() {
        for (i, l) in DiagnosisLabel::ALL.iter().enumerate() {
            assert_eq!(l.code(), i);
            assert_eq!(serde_json::to_string(l).unwrap(), i.to_string());
            assert_eq!(l.name().parse::<DiagnosisLabel>().unwrap(), *l);
        }
        assert!("3".parse::<DiagnosisLabel>().is_err());
    }

    #[test]
    fn indicator_vector_checks_shape_and_age() {
        let mut v = vec![1.0; N_INDICATORS];
        v[0] = 40.0;
        assert!(IndicatorVector::new(v.clone(), Gender::F, 160.0, 55.0).is_ok());
        assert!(IndicatorVector::new(v[..33].to_vec(), Gender::F, 160.0, 55.0).is_err());
        v[0] = 95.0;
        assert!(IndicatorVector::new(v.clone(), Gender::F, 160.0, 55.0).is_err());
        v[0] = 40.0;
        v[5] = f64::NAN;
        assert!(IndicatorVector::new(v, Gender::F, 160.0, 55.0).is_err());
    }

    #[test]
    fn note_token_bounds() {
        assert!(ClinicalNote::new("...").is_err());
        assert!(ClinicalNote::new("word ".repeat(MAX_TOKENS + 1)).is_err());
        assert_eq!(ClinicalNote::new("a b").unwrap().tokens().len(), 2);
    }

    #[test]
    fn feature_names_match_feature_vector() {
        let mut v = vec![0.0; N_INDICATORS];
        v[0] = 30.0;
        let ind = IndicatorVector::new(v, Gender::M, 170.0, 70.0).unwrap();
        assert_eq!(ind.features().len(), N_FEATURES);
        assert_eq!(feature_names().len(), N_FEATURES);
        assert_eq!(ind.features()[34], 1.0);
    }

    #[test]
    fn duplicate_card_ids_rejected() {
        let r = PatientRecord {
            card_id: "a".into(),
            indicators: None,
            note: None,
            image: None,
            label: None,
        };
        let prov = Provenance::Files {
            indicators: String::new(),
            notes: String::new(),
            images: String::new(),
        };
        assert!(matches!(
            CohortDataset::new(vec![r.clone(), r], prov),
            Err(CohortError::DuplicateCardId(_))
        ));
    }
}
