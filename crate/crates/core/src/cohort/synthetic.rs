//! Seeded synthetic cohort generator.
//!
//! Each class plants a signal in all three modalities:
//!
//! | class     | age mean | glucose mean (mmol/L) | note keywords          | scan protrusion            |
//! |-----------|----------|-----------------------|------------------------|----------------------------|
//! | normal    | 40       | 5.0                   | "normal"               | none                       |
//! | herniated | 35       | 6.4                   | "protrusion", "became" | crosses the vertical line  |
//! | bulging   | 52       | 5.7                   | "bulging", "slightly"  | small bump left of line    |
//!
//! `noise_level` widens the indicator distributions, swaps keyword phrases for
//! random-class phrases, jitters protrusion length and adds pixel noise.
//! `complementarity` is the fraction of patients whose signal is removed from
//! exactly one randomly chosen modality.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    split_dataset, ClinicalNote, CohortDataset, CohortError, DiagnosisLabel, Gender,
    IndicatorVector, Modality, PatientRecord, Provenance, ScanImage, IMAGE_SIDE, N_CLASSES,
    N_INDICATORS,
};

/// Column (x) of the vertical boundary line in generated scans. Herniated
/// protrusions extend past it, bulging ones stop short of it.
pub const BLOB_LINE_X: usize = 48;

const AGE_MEANS: [f64; N_CLASSES] = [40.0, 35.0, 52.0];
const GLUCOSE_MEANS: [f64; N_CLASSES] = [5.0, 6.4, 5.7];
const MALE_TO_FEMALE: f64 = 1.16;
const MIN_AGE: f64 = 21.0;
const MAX_AGE: f64 = 82.0;
const TRAIN_RATIO: f64 = 0.75;
const MIN_PATIENTS: usize = 30;

const COLUMN_X0: usize = 18;
const COLUMN_X1: usize = 39;
const DISC_SPACING: usize = 11;
const PROTRUSION_HALF_HEIGHT: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_patients: usize,
    pub class_priors: [f64; N_CLASSES],
    pub noise_level: f64,
    pub complementarity: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_patients: 626,
            class_priors: [1.0 / 3.0; N_CLASSES],
            noise_level: 0.2,
            complementarity: 0.3,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), CohortError> {
        if self.n_patients < MIN_PATIENTS {
            return Err(CohortError::TooFewPatients {
                min: MIN_PATIENTS,
                got: self.n_patients,
            });
        }
        if self.class_priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(CohortError::InvalidConfig(format!(
                "class priors must be nonnegative, got {:?}",
                self.class_priors
            )));
        }
        if (self.class_priors.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CohortError::InvalidConfig(format!(
                "class priors must sum to 1, got {:?}",
                self.class_priors
            )));
        }
        if self.class_priors.contains(&0.0) {
            return Err(CohortError::DegeneratePrior(self.class_priors));
        }
        for (name, v) in [
            ("noise_level", self.noise_level),
            ("complementarity", self.complementarity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CohortError::InvalidConfig(format!(
                    "{name} must be in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Inclusive pixel bounding box of a planted protrusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl SignalBox {
    /// Box scaled by `factor` about its center, clipped to the image.
    pub fn dilated(&self, factor: f64) -> SignalBox {
        let cx = (self.x0 + self.x1) as f64 / 2.0;
        let cy = (self.y0 + self.y1) as f64 / 2.0;
        let hw = (self.x1 - self.x0 + 1) as f64 * factor / 2.0;
        let hh = (self.y1 - self.y0 + 1) as f64 * factor / 2.0;
        let clip = |v: f64| v.clamp(0.0, (IMAGE_SIDE - 1) as f64);
        SignalBox {
            x0: clip((cx - hw + 0.5).ceil()) as usize,
            y0: clip((cy - hh + 0.5).ceil()) as usize,
            x1: clip((cx + hw - 0.5).floor()) as usize,
            y1: clip((cy + hh - 0.5).floor()) as usize,
        }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }
}

/// Generator-known ground truth for one patient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTruth {
    pub signal_box: Option<SignalBox>,
    /// Modality whose class signal was removed, if any.
    pub ambiguous: Option<Modality>,
}

/// Generates a cohort together with its ground truth. The returned dataset
/// carries a stratified 75:25 split seeded by `config.seed`.
pub fn generate_synthetic_cohort(
    config: &SyntheticConfig,
) -> Result<(CohortDataset, BTreeMap<String, SyntheticTruth>), CohortError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.n_patients;

    let mut labels = allocate_labels(n, &config.class_priors);
    labels.shuffle(&mut rng);

    let n_male = (n as f64 * MALE_TO_FEMALE / (1.0 + MALE_TO_FEMALE)).round() as usize;
    let mut genders: Vec<Gender> = (0..n)
        .map(|i| if i < n_male { Gender::M } else { Gender::F })
        .collect();
    genders.shuffle(&mut rng);

    let n_ambiguous = (config.complementarity * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut ambiguous = vec![None; n];
    for &i in &order[..n_ambiguous] {
        ambiguous[i] = Some(Modality::ALL[rng.random_range(0..3)]);
    }

    let mut records = Vec::with_capacity(n);
    let mut truth = BTreeMap::new();
    for i in 0..n {
        let card_id = format!("80{:06}", 110_000 + i);
        let label = labels[i];
        let amb = ambiguous[i];
        let indicators = gen_indicators(
            &mut rng,
            label,
            genders[i],
            config.noise_level,
            amb == Some(Modality::Indicator),
        );
        let note = gen_note(
            &mut rng,
            label,
            config.noise_level,
            amb == Some(Modality::Text),
        );
        let (image, signal_box) = gen_scan(
            &mut rng,
            label,
            config.noise_level,
            amb == Some(Modality::Image),
        );
        truth.insert(
            card_id.clone(),
            SyntheticTruth {
                signal_box,
                ambiguous: amb,
            },
        );
        records.push(PatientRecord {
            card_id,
            indicators: Some(indicators),
            note: Some(note),
            image: Some(image),
            label: Some(label),
        });
    }

    let mut dataset = CohortDataset::new(
        records,
        Provenance::Synthetic {
            config: config.clone(),
        },
    )?;
    let (train, val) = split_dataset(&dataset, TRAIN_RATIO, config.seed)?;
    dataset.apply_split(&train, &val)?;
    Ok((dataset, truth))
}

/// Largest-remainder allocation of `n` labels to the priors.
fn allocate_labels(n: usize, priors: &[f64; N_CLASSES]) -> Vec<DiagnosisLabel> {
    let exact: Vec<f64> = priors.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..N_CLASSES).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = n - counts.iter().sum::<usize>();
    for &k in by_remainder.iter().cycle() {
        if missing == 0 {
            break;
        }
        counts[k] += 1;
        missing -= 1;
    }
    DiagnosisLabel::ALL
        .iter()
        .zip(counts)
        .flat_map(|(l, c)| std::iter::repeat_n(*l, c))
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng, mean: f64, std: f64) -> f64 {
    Normal::new(mean, std).expect("finite std").sample(rng)
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

fn gen_indicators(
    rng: &mut ChaCha8Rng,
    label: DiagnosisLabel,
    gender: Gender,
    noise: f64,
    ambiguous: bool,
) -> IndicatorVector {
    let k = label.code();
    let age_std = 2.0 + 25.0 * noise;
    let glucose_std = 0.15 + 1.25 * noise;
    let (age_mean, glucose_mean) = if ambiguous {
        (
            AGE_MEANS.iter().sum::<f64>() / 3.0,
            GLUCOSE_MEANS.iter().sum::<f64>() / 3.0,
        )
    } else {
        (AGE_MEANS[k], GLUCOSE_MEANS[k])
    };
    let age = gaussian(rng, age_mean, age_std)
        .round()
        .clamp(MIN_AGE, MAX_AGE);
    let glucose = round_to(gaussian(rng, glucose_mean, glucose_std).max(2.5), 2);

    let mut values = Vec::with_capacity(N_INDICATORS);
    values.push(age);
    values.push(glucose);
    for j in 0..N_INDICATORS - 2 {
        let mean = 5.0 + ((j * 37) % 90) as f64;
        let std = 0.1 * mean;
        values.push(round_to(gaussian(rng, mean, std).max(0.0), 3));
    }

    let (h_mean, h_std) = match gender {
        Gender::M => (171.0, 6.0),
        Gender::F => (159.0, 5.5),
    };
    let height = round_to(gaussian(rng, h_mean, h_std), 1);
    let bmi = gaussian(rng, 23.5, 2.8).clamp(16.0, 38.0);
    let weight = round_to(bmi * (height / 100.0).powi(2), 1);
    IndicatorVector::new(values, gender, height, weight).expect("generator keeps invariants")
}

const NORMAL_PHRASES: [&str; 2] = ["disc signal is normal", "curvature is normal"];
const HERNIATED_PHRASES: [&str; 2] = ["disc protrusion at {lvl}", "curvature became straight"];
const BULGING_PHRASES: [&str; 2] = ["disc is slightly bulging at {lvl}", "disc bulging at {lvl}"];

const FILLER_SENTENCES: [&str; 8] = [
    "cervical spine mri examination",
    "vertebral bodies show mild degenerative changes",
    "spinal cord signal is homogeneous",
    "no fracture of the vertebral bodies",
    "the spinal canal is patent",
    "paravertebral soft tissue unremarkable",
    "sagittal and axial sequences obtained",
    "alignment of the vertebral bodies is preserved",
];

const NOISE_TOKENS: [&str; 14] = [
    "mild",
    "left",
    "right",
    "posterior",
    "anterior",
    "level",
    "segment",
    "margin",
    "osteophyte",
    "ligament",
    "foramen",
    "t2",
    "t1",
    "series",
];

const LEVELS: [&str; 5] = ["c2 c3", "c3 c4", "c4 c5", "c5 c6", "c6 c7"];

fn class_phrase(rng: &mut ChaCha8Rng, label: DiagnosisLabel) -> String {
    let pool = match label {
        DiagnosisLabel::Normal => &NORMAL_PHRASES,
        DiagnosisLabel::Herniated => &HERNIATED_PHRASES,
        DiagnosisLabel::Bulging => &BULGING_PHRASES,
    };
    let phrase = pool[rng.random_range(0..pool.len())];
    phrase.replace("{lvl}", LEVELS[rng.random_range(0..LEVELS.len())])
}

fn gen_note(
    rng: &mut ChaCha8Rng,
    label: DiagnosisLabel,
    noise: f64,
    ambiguous: bool,
) -> ClinicalNote {
    let mut sentences: Vec<String> = Vec::new();
    let n_filler = rng.random_range(1..=3);
    for _ in 0..n_filler {
        sentences.push(FILLER_SENTENCES[rng.random_range(0..FILLER_SENTENCES.len())].to_string());
    }
    for _ in 0..3 {
        if ambiguous {
            sentences
                .push(FILLER_SENTENCES[rng.random_range(0..FILLER_SENTENCES.len())].to_string());
        } else {
            let phrase_label = if rng.random::<f64>() < noise {
                DiagnosisLabel::ALL[rng.random_range(0..N_CLASSES)]
            } else {
                label
            };
            sentences.push(class_phrase(rng, phrase_label));
        }
    }
    sentences.shuffle(rng);
    let n_noise = rng.random_range(0..=2) + (noise * 10.0).round() as usize;
    for _ in 0..n_noise {
        let at = rng.random_range(0..=sentences.len());
        sentences.insert(
            at,
            NOISE_TOKENS[rng.random_range(0..NOISE_TOKENS.len())].to_string(),
        );
    }
    let mut text = sentences.join(". ");
    text.push('.');
    ClinicalNote::new(text).expect("generated notes are nonempty and short")
}

/// One protrusion drawn onto a scan: which disc it sits on and how far (in
/// pixels) it extends right of the vertebral column.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Protrusion {
    pub disc: usize,
    pub length: usize,
}

/// Disc stripe center rows for a given vertical phase.
fn disc_rows(phase: usize) -> Vec<usize> {
    (0..)
        .map(|i| phase + DISC_SPACING * i)
        .take_while(|&r| r + 2 < IMAGE_SIDE)
        .collect()
}

/// Renders a scan with the given protrusions. Returns the image and one
/// bounding box per protrusion.
pub(crate) fn render_scan(
    rng: &mut ChaCha8Rng,
    phase: usize,
    protrusions: &[Protrusion],
    pixel_noise: f64,
    occlude: bool,
) -> (ScanImage, Vec<SignalBox>) {
    let side = IMAGE_SIDE;
    let mut px = vec![0.08; side * side];
    let discs = disc_rows(phase);
    for y in 0..side {
        let in_disc = discs.iter().any(|&c| y + 1 >= c && y <= c + 1);
        for x in COLUMN_X0..=COLUMN_X1 {
            px[y * side + x] = if in_disc { 0.25 } else { 0.65 };
        }
        for x in COLUMN_X1 + 1..BLOB_LINE_X {
            px[y * side + x] = 0.35;
        }
        px[y * side + BLOB_LINE_X] = 0.95;
    }
    let mut boxes = Vec::new();
    for p in protrusions {
        let cy = discs[p.disc.min(discs.len() - 1)];
        let y0 = cy.saturating_sub(PROTRUSION_HALF_HEIGHT);
        let y1 = (cy + PROTRUSION_HALF_HEIGHT).min(side - 1);
        let x0 = COLUMN_X1 + 1;
        let x1 = (x0 + p.length.max(1) - 1).min(side - 1);
        for y in y0..=y1 {
            // rounded tip: outer rows are one pixel shorter
            let row_x1 = if y == y0 || y == y1 {
                x1.saturating_sub(1).max(x0)
            } else {
                x1
            };
            for x in x0..=row_x1 {
                px[y * side + x] = 0.85;
            }
        }
        boxes.push(SignalBox { x0, y0, x1, y1 });
    }
    if occlude {
        for y in 0..side {
            for x in COLUMN_X1 - 1..=BLOB_LINE_X + 8 {
                px[y * side + x] = 0.5;
            }
        }
    }
    if pixel_noise > 0.0 {
        let normal = Normal::new(0.0, pixel_noise).expect("finite std");
        for p in px.iter_mut() {
            *p += normal.sample(rng);
        }
    }
    let image = ScanImage::new(
        px.iter()
            .map(|p| (p.clamp(0.0, 1.0) * 255.0).round() / 255.0)
            .collect(),
    )
    .expect("rendered scan is valid");
    (image, boxes)
}

fn gen_scan(
    rng: &mut ChaCha8Rng,
    label: DiagnosisLabel,
    noise: f64,
    ambiguous: bool,
) -> (ScanImage, Option<SignalBox>) {
    let phase = rng.random_range(3..=8);
    let n_discs = disc_rows(phase).len();
    let disc = rng.random_range(1..n_discs - 1);
    let jitter = 6.0 * noise;
    let length = match label {
        DiagnosisLabel::Normal => None,
        DiagnosisLabel::Herniated => Some(gaussian(rng, 12.5, 0.5 + 1.5 * jitter)),
        DiagnosisLabel::Bulging => Some(gaussian(rng, 4.5, 0.5 + jitter)),
    };
    let protrusions: Vec<Protrusion> = length
        .map(|l| l.round())
        .filter(|l| *l >= 1.0)
        .map(|l| Protrusion {
            disc,
            length: l.min(20.0) as usize,
        })
        .into_iter()
        .collect();
    let pixel_noise = 0.02 + 0.35 * noise;
    let (image, boxes) = render_scan(rng, phase, &protrusions, pixel_noise, ambiguous);
    (image, boxes.first().copied())
}

/// Builds a scan with protrusions on two different discs, one crossing the
/// boundary line (herniated evidence) and one short bump (bulging evidence).
/// Returns the image with the herniated box first.
pub fn two_protrusion_scan(seed: u64) -> (ScanImage, SignalBox, SignalBox) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase = 5;
    let protrusions = [
        Protrusion {
            disc: 1,
            length: 12,
        },
        Protrusion { disc: 4, length: 5 },
    ];
    let (image, boxes) = render_scan(&mut rng, phase, &protrusions, 0.02, false);
    (image, boxes[0], boxes[1])
}
