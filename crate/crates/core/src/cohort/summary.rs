use serde::{Deserialize, Serialize};

use super::{CohortDataset, CohortError, Gender, Subset, N_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

/// Descriptive statistics for a cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSummary {
    pub n_records: usize,
    /// Labeled records per class code.
    pub class_counts: [usize; N_CLASSES],
    pub unlabeled: usize,
    pub age: Option<AgeStats>,
    pub n_male: usize,
    pub n_female: usize,
    /// Male-to-female ratio; `None` when there are no female records.
    pub gender_ratio: Option<f64>,
    /// Records with indicator, text and image data, in modality order.
    pub availability: [usize; 3],
    pub train_size: usize,
    pub val_size: usize,
}

pub fn cohort_summary(dataset: &CohortDataset) -> Result<CohortSummary, CohortError> {
    if dataset.is_empty() {
        return Err(CohortError::Empty);
    }
    let mut class_counts = [0; N_CLASSES];
    let mut unlabeled = 0;
    let mut availability = [0; 3];
    let (mut n_male, mut n_female) = (0, 0);
    let mut ages = Vec::new();
    for r in dataset.records() {
        match r.label {
            Some(l) => class_counts[l.code()] += 1,
            None => unlabeled += 1,
        }
        for (slot, present) in availability.iter_mut().zip(r.mask().0) {
            *slot += usize::from(present);
        }
        if let Some(ind) = &r.indicators {
            ages.push(ind.age());
            match ind.gender {
                Gender::M => n_male += 1,
                Gender::F => n_female += 1,
            }
        }
    }
    let age = (!ages.is_empty()).then(|| AgeStats {
        min: ages.iter().copied().fold(f64::INFINITY, f64::min),
        max: ages.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: ages.iter().sum::<f64>() / ages.len() as f64,
    });
    Ok(CohortSummary {
        n_records: dataset.len(),
        class_counts,
        unlabeled,
        age,
        n_male,
        n_female,
        gender_ratio: (n_female > 0).then(|| n_male as f64 / n_female as f64),
        availability,
        train_size: dataset.indices_of(Subset::Train).len(),
        val_size: dataset.indices_of(Subset::Val).len(),
    })
}
