use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CohortDataset, CohortError, DiagnosisLabel, N_CLASSES};

/// Train and validation record indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Shuffled member indices per class, in class-code order.
fn members_by_class(labels: &[DiagnosisLabel], rng: &mut ChaCha8Rng) -> [Vec<usize>; N_CLASSES] {
    let mut by_class: [Vec<usize>; N_CLASSES] = Default::default();
    for (i, l) in labels.iter().enumerate() {
        by_class[l.code()].push(i);
    }
    for members in by_class.iter_mut() {
        members.shuffle(rng);
    }
    by_class
}

fn all_labels(dataset: &CohortDataset) -> Result<Vec<DiagnosisLabel>, CohortError> {
    dataset
        .records()
        .iter()
        .map(|r| r.require_label())
        .collect()
}

/// Stratified random split. Each class contributes `round(ratio * count)`
/// members to the training side. Returns `(train, val)` sorted indices.
pub fn split_dataset(
    dataset: &CohortDataset,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>), CohortError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CohortError::InvalidRatio(ratio));
    }
    if dataset.is_empty() {
        return Err(CohortError::Empty);
    }
    let labels = all_labels(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = members_by_class(&labels, &mut rng);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (code, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(CohortError::CannotStratify {
                label: DiagnosisLabel::ALL[code],
                count: members.len(),
                needed: 2,
            });
        }
        let n_train = ((ratio * members.len() as f64).round() as usize).clamp(1, members.len() - 1);
        train.extend_from_slice(&members[..n_train]);
        val.extend_from_slice(&members[n_train..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

/// Stratified k-fold partition.
///
/// Fold sizes differ by at most one. The class-by-fold count table is a
/// controlled rounding of the proportional targets `count * size / n`: every
/// cell is the floor or ceiling of its target and both margins are exact.
pub fn kfold(dataset: &CohortDataset, k: usize, seed: u64) -> Result<Vec<Fold>, CohortError> {
    kfold_labels(&all_labels(dataset)?, k, seed)
}

/// [`kfold`] over a bare label list; fold indices refer to `labels`.
pub fn kfold_labels(
    labels: &[DiagnosisLabel],
    k: usize,
    seed: u64,
) -> Result<Vec<Fold>, CohortError> {
    let n = labels.len();
    if k < 2 || k > n {
        return Err(CohortError::InvalidFolds { k, n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let by_class = members_by_class(labels, &mut rng);
    for (code, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(CohortError::CannotStratify {
                label: DiagnosisLabel::ALL[code],
                count: members.len(),
                needed: k,
            });
        }
    }
    let sizes: Vec<usize> = (0..k).map(|f| n / k + usize::from(f < n % k)).collect();
    let class_sizes: Vec<usize> = by_class.iter().map(Vec::len).collect();
    let table = controlled_rounding(&class_sizes, &sizes);

    let mut fold_of = vec![0usize; n];
    for (members, row) in by_class.iter().zip(&table) {
        let mut it = members.iter();
        for (f, &count) in row.iter().enumerate() {
            for &i in it.by_ref().take(count) {
                fold_of[i] = f;
            }
        }
    }
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| fold_of[i] == f);
            Fold { train, val }
        })
        .collect())
}

/// Rounds the table `rows[r] * cols[c] / total` to integers, each cell to its
/// floor or ceiling, keeping row sums `rows` and column sums `cols`. The
/// leftover units form a bipartite transportation problem solved by
/// augmenting paths.
fn controlled_rounding(rows: &[usize], cols: &[usize]) -> Vec<Vec<usize>> {
    let total: usize = rows.iter().sum();
    let mut table: Vec<Vec<usize>> = rows
        .iter()
        .map(|&r| cols.iter().map(|&c| r * c / total).collect())
        .collect();
    let fractional = |r: usize, c: usize| !(rows[r] * cols[c]).is_multiple_of(total);
    let mut row_need: Vec<usize> = rows
        .iter()
        .zip(&table)
        .map(|(&r, row)| r - row.iter().sum::<usize>())
        .collect();
    let mut col_need: Vec<usize> = cols
        .iter()
        .enumerate()
        .map(|(c, &s)| s - table.iter().map(|row| row[c]).sum::<usize>())
        .collect();
    // extra[r][c] marks a rounded-up cell
    let mut extra = vec![vec![false; cols.len()]; rows.len()];
    while let Some(start) = (0..rows.len()).find(|&r| row_need[r] > 0) {
        // BFS over alternating paths: row -> (unused fractional cell) -> col -> (used cell) -> row
        let mut prev_col: Vec<Option<usize>> = vec![None; cols.len()];
        let mut prev_row: Vec<Option<usize>> = vec![None; rows.len()];
        let mut visited_row = vec![false; rows.len()];
        visited_row[start] = true;
        let mut queue = std::collections::VecDeque::from([start]);
        let mut end = None;
        while let Some(r) = queue.pop_front() {
            for c in 0..cols.len() {
                if prev_col[c].is_some() || extra[r][c] || !fractional(r, c) {
                    continue;
                }
                prev_col[c] = Some(r);
                if col_need[c] > 0 {
                    end = Some(c);
                    break;
                }
                for r2 in 0..rows.len() {
                    if extra[r2][c] && !visited_row[r2] {
                        visited_row[r2] = true;
                        prev_row[r2] = Some(c);
                        queue.push_back(r2);
                    }
                }
            }
            if end.is_some() {
                break;
            }
        }
        let mut c = end.expect("controlled rounding always exists");
        col_need[c] -= 1;
        loop {
            let r = prev_col[c].expect("path");
            extra[r][c] = true;
            match prev_row[r] {
                Some(c_prev) => {
                    extra[r][c_prev] = false;
                    c = c_prev;
                }
                None => {
                    row_need[r] -= 1;
                    break;
                }
            }
        }
    }
    for (row, flags) in table.iter_mut().zip(&extra) {
        for (cell, &up) in row.iter_mut().zip(flags) {
            *cell += usize::from(up);
        }
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{PatientRecord, Provenance};
    use proptest::prelude::*;

    fn dataset_with_counts(counts: [usize; 3]) -> CohortDataset {
        let mut records = Vec::new();
        for (code, &c) in counts.iter().enumerate() {
            for j in 0..c {
                records.push(PatientRecord {
                    card_id: format!("{code}-{j}"),
                    indicators: None,
                    note: None,
                    image: None,
                    label: DiagnosisLabel::from_code(code),
                });
            }
        }
        CohortDataset::new(
            records,
            Provenance::Files {
                indicators: String::new(),
                notes: String::new(),
                images: String::new(),
            },
        )
        .unwrap()
    }

    #[test]
    fn default_cohort_split_sizes() {
        let ds = dataset_with_counts([209, 209, 208]);
        let (train, val) = split_dataset(&ds, 0.75, 1).unwrap();
        assert!(train.len() == 469 || train.len() == 470, "{}", train.len());
        assert_eq!(train.len() + val.len(), 626);
    }

    #[test]
    fn half_split_of_four() {
        let ds = dataset_with_counts([2, 2, 0]);
        let (train, val) = split_dataset(&ds, 0.5, 9).unwrap();
        assert_eq!((train.len(), val.len()), (2, 2));
    }

    #[test]
    fn split_errors() {
        let ds = dataset_with_counts([5, 1, 5]);
        assert!(matches!(
            split_dataset(&ds, 0.75, 0),
            Err(CohortError::CannotStratify { count: 1, .. })
        ));
        let ds = dataset_with_counts([5, 5, 5]);
        assert!(split_dataset(&ds, 0.0, 0).is_err());
        assert!(split_dataset(&ds, 1.0, 0).is_err());
    }

    #[test]
    fn kfold_partitions() {
        let ds = dataset_with_counts([5, 5, 0]);
        let folds = kfold(&ds, 5, 3).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<usize> = folds.iter().flat_map(|f| f.val.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.val.len() == 2 && f.train.len() == 8));
    }

    #[test]
    fn kfold_default_cohort_sizes() {
        let ds = dataset_with_counts([209, 209, 208]);
        let folds = kfold(&ds, 5, 0).unwrap();
        assert!(folds
            .iter()
            .all(|f| f.val.len() == 125 || f.val.len() == 126));
    }

    #[test]
    fn kfold_errors() {
        let ds = dataset_with_counts([4, 3, 3]);
        assert!(kfold(&ds, 11, 0).is_err());
        assert!(kfold(&ds, 1, 0).is_err());
        assert!(matches!(
            kfold(&ds, 4, 0),
            Err(CohortError::CannotStratify { .. })
        ));
    }

    fn assert_stratified(ds: &CohortDataset, val: &[usize]) {
        let global = ds.class_counts(&(0..ds.len()).collect::<Vec<_>>());
        let local = ds.class_counts(val);
        for k in 0..N_CLASSES {
            let dev =
                (local[k] as f64 / val.len() as f64 - global[k] as f64 / ds.len() as f64).abs();
            assert!(dev < 1.0 / val.len() as f64, "class {k} deviates by {dev}");
        }
    }

    #[test]
    fn controlled_rounding_respects_margins() {
        let t = controlled_rounding(&[5, 22, 8], &[12, 12, 11]);
        for (r, &rs) in [5usize, 22, 8].iter().enumerate() {
            assert_eq!(t[r].iter().sum::<usize>(), rs);
            for (c, &cs) in [12usize, 12, 11].iter().enumerate() {
                let target = (rs * cs) as f64 / 35.0;
                assert!((t[r][c] as f64 - target).abs() < 1.0);
            }
        }
        for (c, &cs) in [12usize, 12, 11].iter().enumerate() {
            assert_eq!(t.iter().map(|row| row[c]).sum::<usize>(), cs);
        }
    }

    proptest! {
        #[test]
        fn split_is_deterministic_and_stratified(
            a in 5usize..60, b in 5usize..60, c in 5usize..60,
            ratio in 0.2f64..0.8, seed in 0u64..1000,
        ) {
            let ds = dataset_with_counts([a, b, c]);
            let first = split_dataset(&ds, ratio, seed).unwrap();
            prop_assert_eq!(&first, &split_dataset(&ds, ratio, seed).unwrap());
            let (train, val) = first;
            prop_assert_eq!(train.len() + val.len(), ds.len());
            let tc = ds.class_counts(&train);
            for (k, &n) in [a, b, c].iter().enumerate() {
                prop_assert!((tc[k] as f64 - ratio * n as f64).abs() <= 1.0);
            }
            assert_stratified(&ds, &val);
        }

        #[test]
        fn kfold_is_partition_and_stratified(
            a in 5usize..40, b in 5usize..40, c in 5usize..40, k in 2usize..6, seed in 0u64..100,
        ) {
            let ds = dataset_with_counts([a, b, c]);
            let folds = kfold(&ds, k, seed).unwrap();
            prop_assert_eq!(&folds, &kfold(&ds, k, seed).unwrap());
            let mut seen = vec![0; ds.len()];
            for f in &folds {
                prop_assert_eq!(f.train.len() + f.val.len(), ds.len());
                for &i in &f.val { seen[i] += 1; }
                assert_stratified(&ds, &f.val);
            }
            prop_assert!(seen.iter().all(|&s| s == 1));
        }
    }
}
