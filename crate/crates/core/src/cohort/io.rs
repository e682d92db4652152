//! Cohort interchange files.
//!
//! * indicators: CSV, header `card_id,gender,age,height,weight,glucose,ind_00..ind_31,label`
//! * notes: JSON lines `{"card_id": .., "text": .., "label": ..}`
//! * images: `<card_id>.png`, 64x64 8-bit grayscale
//! * manifest: JSON with provenance, split and generator ground truth

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    ClinicalNote, CohortDataset, CohortError, DiagnosisLabel, Gender, IndicatorVector,
    PatientRecord, Provenance, ScanImage, Subset, SyntheticTruth, IMAGE_SIDE, N_INDICATORS,
};
use crate::imageio::{decode_gray_png, encode_gray_png};

pub const INDICATORS_FILE: &str = "indicators.csv";
pub const NOTES_FILE: &str = "notes.jsonl";
pub const IMAGES_DIR: &str = "images";
pub const MANIFEST_FILE: &str = "manifest.json";

const MANIFEST_VERSION: u32 = 1;

fn header() -> Vec<String> {
    let mut h: Vec<String> = ["card_id", "gender", "age", "height", "weight", "glucose"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..N_INDICATORS - 2).map(|i| format!("ind_{i:02}")));
    h.push("label".into());
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub provenance: Provenance,
    pub split: BTreeMap<String, Subset>,
    #[serde(default)]
    pub truth: BTreeMap<String, SyntheticTruth>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CohortError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| CohortError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CohortError::Malformed {
            path: path.display().to_string(),
            line: e.line() as u64,
            reason: e.to_string(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct NoteLine {
    card_id: String,
    text: String,
    label: Option<DiagnosisLabel>,
}

/// Writes the dataset's interchange files into `dir`.
pub fn write_cohort(
    dataset: &CohortDataset,
    truth: &BTreeMap<String, SyntheticTruth>,
    dir: impl AsRef<Path>,
) -> Result<(), CohortError> {
    let dir = dir.as_ref();
    let images = dir.join(IMAGES_DIR);
    fs::create_dir_all(&images).map_err(|e| CohortError::io(&images, e))?;

    let csv_path = dir.join(INDICATORS_FILE);
    let mut csv = csv::Writer::from_path(&csv_path).map_err(|e| csv_err(&csv_path, e))?;
    csv.write_record(header())
        .map_err(|e| csv_err(&csv_path, e))?;
    let notes_path = dir.join(NOTES_FILE);
    let notes_file = fs::File::create(&notes_path).map_err(|e| CohortError::io(&notes_path, e))?;
    let mut notes = BufWriter::new(notes_file);

    for r in dataset.records() {
        let label = r.label.map(|l| l.code().to_string()).unwrap_or_default();
        if let Some(ind) = &r.indicators {
            let v = ind.values();
            let mut row = vec![
                r.card_id.clone(),
                format!("{:?}", ind.gender),
                v[0].to_string(),
                ind.height.to_string(),
                ind.weight.to_string(),
            ];
            row.extend(v[1..].iter().map(|x| x.to_string()));
            row.push(label);
            csv.write_record(&row).map_err(|e| csv_err(&csv_path, e))?;
        }
        if let Some(note) = &r.note {
            let line = NoteLine {
                card_id: r.card_id.clone(),
                text: note.raw_text().to_string(),
                label: r.label,
            };
            let json = serde_json::to_string(&line).expect("note line serializes");
            writeln!(notes, "{json}").map_err(|e| CohortError::io(&notes_path, e))?;
        }
        if let Some(img) = &r.image {
            let path = images.join(format!("{}.png", r.card_id));
            let png = encode_gray_png(IMAGE_SIDE as u32, IMAGE_SIDE as u32, &img.to_bytes())
                .expect("in-memory png encoding");
            fs::write(&path, png).map_err(|e| CohortError::io(&path, e))?;
        }
    }
    csv.flush().map_err(|e| CohortError::io(&csv_path, e))?;
    notes.flush().map_err(|e| CohortError::io(&notes_path, e))?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        provenance: dataset.provenance().clone(),
        split: dataset.split().clone(),
        truth: truth.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| CohortError::io(&path, e))?;
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> CohortError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    CohortError::Malformed {
        path: path.display().to_string(),
        line,
        reason: e.to_string(),
    }
}

/// A loaded cohort plus the card_ids dropped for lacking a modality.
#[derive(Debug, Clone)]
pub struct LoadedCohort {
    pub dataset: CohortDataset,
    pub dropped: Vec<String>,
}

fn parse_label(s: &str) -> Result<Option<DiagnosisLabel>, String> {
    if s.trim().is_empty() {
        return Ok(None);
    }
    s.parse().map(Some)
}

fn read_indicators(
    path: &Path,
) -> Result<Vec<(String, IndicatorVector, Option<DiagnosisLabel>)>, CohortError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let expected = header();
    let malformed = |line: u64, reason: String| CohortError::Malformed {
        path: path.display().to_string(),
        line,
        reason,
    };
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if found != expected {
        return Err(malformed(1, "unexpected header".into()));
    }
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        if rec.len() != expected.len() {
            return Err(malformed(
                line,
                format!("row has {} columns, expected {}", rec.len(), expected.len()),
            ));
        }
        let num = |i: usize| -> Result<f64, CohortError> {
            rec[i].trim().parse::<f64>().map_err(|_| {
                malformed(
                    line,
                    format!("column {} is not a number: {:?}", expected[i], &rec[i]),
                )
            })
        };
        let card_id = rec[0].trim().to_string();
        if card_id.is_empty() {
            return Err(malformed(line, "empty card_id".into()));
        }
        let gender = match rec[1].trim() {
            "M" | "m" => Gender::M,
            "F" | "f" => Gender::F,
            other => return Err(malformed(line, format!("invalid gender {other:?}"))),
        };
        let mut values = vec![num(2)?];
        for i in 5..5 + N_INDICATORS - 1 {
            values.push(num(i)?);
        }
        let ind = IndicatorVector::new(values, gender, num(3)?, num(4)?)
            .map_err(|e| malformed(line, e))?;
        let label = parse_label(&rec[expected.len() - 1]).map_err(|e| malformed(line, e))?;
        rows.push((card_id, ind, label));
    }
    Ok(rows)
}

fn read_notes(
    path: &Path,
) -> Result<Vec<(String, ClinicalNote, Option<DiagnosisLabel>)>, CohortError> {
    let file = fs::File::open(path).map_err(|e| CohortError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CohortError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |reason: String| CohortError::Malformed {
            path: path.display().to_string(),
            line: i as u64 + 1,
            reason,
        };
        let parsed: NoteLine = serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        let note = ClinicalNote::new(parsed.text).map_err(malformed)?;
        out.push((parsed.card_id, note, parsed.label));
    }
    Ok(out)
}

fn read_image(path: &Path) -> Result<ScanImage, CohortError> {
    let bytes = fs::read(path).map_err(|e| CohortError::io(path, e))?;
    let malformed = |reason: String| CohortError::Malformed {
        path: path.display().to_string(),
        line: 0,
        reason,
    };
    let px = decode_gray_png(&bytes, IMAGE_SIDE as u32, IMAGE_SIDE as u32)
        .map_err(|e| malformed(e.to_string()))?;
    ScanImage::from_bytes(&px).map_err(malformed)
}

/// Loads and joins the three modality sources on card_id. Records missing any
/// modality are dropped and reported. Every kept record starts in the
/// training subset; apply a split afterwards.
pub fn load_cohort(
    indicator_path: impl AsRef<Path>,
    notes_path: impl AsRef<Path>,
    images_dir: impl AsRef<Path>,
) -> Result<LoadedCohort, CohortError> {
    let (indicator_path, notes_path, images_dir) = (
        indicator_path.as_ref(),
        notes_path.as_ref(),
        images_dir.as_ref(),
    );
    let indicators = read_indicators(indicator_path)?;
    let notes = read_notes(notes_path)?;

    let mut seen = BTreeSet::new();
    for (id, _, _) in &indicators {
        if !seen.insert(id.clone()) {
            return Err(CohortError::DuplicateCardId(id.clone()));
        }
    }
    let mut note_map: HashMap<String, (ClinicalNote, Option<DiagnosisLabel>)> = HashMap::new();
    let mut note_order = Vec::new();
    for (id, note, label) in notes {
        if note_map.insert(id.clone(), (note, label)).is_some() {
            return Err(CohortError::DuplicateCardId(id));
        }
        note_order.push(id);
    }

    let mut records = Vec::new();
    let mut dropped = Vec::new();
    for (card_id, ind, label) in indicators {
        let note = note_map.remove(&card_id);
        let image_path = images_dir.join(format!("{card_id}.png"));
        let image = if image_path.is_file() {
            Some(read_image(&image_path)?)
        } else {
            None
        };
        let Some((note, note_label)) = note else {
            dropped.push(card_id);
            continue;
        };
        let Some(image) = image else {
            dropped.push(card_id);
            continue;
        };
        if note_label.is_some() && label.is_some() && note_label != label {
            return Err(CohortError::InvalidRecord {
                card_id,
                reason: "indicator and note labels disagree".into(),
            });
        }
        records.push(PatientRecord {
            card_id,
            indicators: Some(ind),
            note: Some(note),
            image: Some(image),
            label: label.or(note_label),
        });
    }
    dropped.extend(
        note_order
            .into_iter()
            .filter(|id| note_map.contains_key(id)),
    );

    let dataset = CohortDataset::new(
        records,
        Provenance::Files {
            indicators: indicator_path.display().to_string(),
            notes: notes_path.display().to_string(),
            images: images_dir.display().to_string(),
        },
    )?;
    Ok(LoadedCohort { dataset, dropped })
}

/// Reads a directory written by [`write_cohort`]: the joined records, with
/// the manifest's provenance and split applied.
pub fn read_cohort_dir(dir: impl AsRef<Path>) -> Result<(CohortDataset, Manifest), CohortError> {
    let dir = dir.as_ref();
    let manifest = Manifest::load(dir.join(MANIFEST_FILE))?;
    let loaded = load_cohort(
        dir.join(INDICATORS_FILE),
        dir.join(NOTES_FILE),
        dir.join(IMAGES_DIR),
    )?;
    let mut dataset = CohortDataset::new(
        loaded.dataset.records().to_vec(),
        manifest.provenance.clone(),
    )?;
    dataset.set_split(manifest.split.clone())?;
    Ok((dataset, manifest))
}
