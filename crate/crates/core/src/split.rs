//! Stratified train / validation / holdout partitioning.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::PersonRecord;
use crate::error::{Error, Result};
use crate::race::{RaceClass, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub holdout: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            validation: 0.1,
            holdout: 0.1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<PersonRecord>,
    pub validation: Vec<PersonRecord>,
    pub holdout: Vec<PersonRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitWarning {
    /// A class with fewer than three rows cannot populate every partition.
    EmptyClass { class: RaceClass, rows: usize },
}

/// Per-class allocation: floor of each share, leftover rows to train first,
/// then validation.
pub fn allocate(n: usize, ratios: &SplitRatios) -> [usize; 3] {
    let shares = [ratios.train, ratios.validation, ratios.holdout];
    let mut counts = shares.map(|s| libm::floor(n as f64 * s + 1e-9) as usize);
    let assigned: usize = counts.iter().sum();
    let mut remainder = n.saturating_sub(assigned);
    let mut slot = 0;
    while remainder > 0 {
        counts[slot % 2] += 1;
        remainder -= 1;
        slot += 1;
    }
    counts
}

/// Shuffles each class under a seeded generator and cuts it proportionally.
/// Every record must be labeled.
pub fn stratified_split(
    records: &[PersonRecord],
    ratios: SplitRatios,
    seed: u64,
) -> Result<(DatasetSplit, Vec<SplitWarning>)> {
    let parts = [ratios.train, ratios.validation, ratios.holdout];
    if parts.iter().any(|r| !(0.0..=1.0).contains(r)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig("split ratios must be in [0, 1] and sum to 1".into()));
    }

    let mut by_class: [Vec<usize>; NUM_CLASSES] = Default::default();
    for (i, r) in records.iter().enumerate() {
        let label = r.label.ok_or_else(|| Error::MissingLabel(r.row_id.clone()))?;
        by_class[label.code()].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut split = DatasetSplit::default();
    let mut warnings = Vec::new();
    for (code, members) in by_class.iter_mut().enumerate() {
        if !members.is_empty() && members.len() < 3 {
            warnings.push(SplitWarning::EmptyClass {
                class: RaceClass::ALL[code],
                rows: members.len(),
            });
        }
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = allocate(members.len(), &ratios);
        for (pos, &idx) in members.iter().enumerate() {
            let record = records[idx].clone();
            if pos < n_train {
                split.train.push(record);
            } else if pos < n_train + n_val {
                split.validation.push(record);
            } else {
                split.holdout.push(record);
            }
        }
    }
    Ok((split, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::format;
    use alloc::string::String;
    use proptest::prelude::*;

    fn labeled(counts: &[(RaceClass, usize)]) -> Vec<PersonRecord> {
        let mut out = Vec::new();
        for &(class, n) in counts {
            for _ in 0..n {
                let id = out.len();
                out.push(
                    PersonRecord::new(format!("r{id}"), "a", None, "b", None, Some(class)).unwrap(),
                );
            }
        }
        out
    }

    fn count(rs: &[PersonRecord], c: RaceClass) -> usize {
        rs.iter().filter(|r| r.label == Some(c)).count()
    }

    #[test]
    fn allocation_rounds_down_and_feeds_train() {
        let r = SplitRatios::default();
        assert_eq!(allocate(10, &r), [8, 1, 1]);
        assert_eq!(allocate(11, &r), [9, 1, 1]);
        assert_eq!(allocate(19, &r), [16, 2, 1]);
        assert_eq!(allocate(2, &r), [2, 0, 0]);
        assert_eq!(allocate(0, &r), [0, 0, 0]);
    }

    #[test]
    fn proportional_per_class() {
        let recs = labeled(&[
            (RaceClass::White, 500),
            (RaceClass::Black, 300),
            (RaceClass::Hispanic, 200),
        ]);
        let (s, warnings) = stratified_split(&recs, SplitRatios::default(), 7).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(count(&s.train, RaceClass::White), 400);
        assert_eq!(count(&s.train, RaceClass::Black), 240);
        assert_eq!(count(&s.train, RaceClass::Hispanic), 160);
        assert_eq!(s.validation.len(), 100);
        assert_eq!(s.holdout.len(), 100);

        let (again, _) = stratified_split(&recs, SplitRatios::default(), 7).unwrap();
        assert_eq!(s, again);
        let (other, _) = stratified_split(&recs, SplitRatios::default(), 8).unwrap();
        assert_ne!(s.train, other.train);
    }

    #[test]
    fn tiny_classes_warn() {
        let recs = labeled(&[(RaceClass::White, 10), (RaceClass::Asian, 2)]);
        let (s, warnings) = stratified_split(&recs, SplitRatios::default(), 1).unwrap();
        assert_eq!(count(&s.train, RaceClass::White), 8);
        assert_eq!(count(&s.validation, RaceClass::White), 1);
        assert_eq!(count(&s.holdout, RaceClass::White), 1);
        assert_eq!(warnings, [SplitWarning::EmptyClass { class: RaceClass::Asian, rows: 2 }]);
    }

    #[test]
    fn unlabeled_rows_are_rejected() {
        let mut recs = labeled(&[(RaceClass::White, 3)]);
        recs[1].label = None;
        assert_eq!(
            stratified_split(&recs, SplitRatios::default(), 0).unwrap_err(),
            Error::MissingLabel("r1".into())
        );
    }

    proptest! {
        #[test]
        fn split_is_a_stratified_partition(
            counts in proptest::collection::vec(0usize..2000, NUM_CLASSES),
            seed in any::<u64>(),
        ) {
            let spec: Vec<_> = RaceClass::ALL.iter().copied().zip(counts.iter().copied()).collect();
            let recs = labeled(&spec);
            let (s, _) = stratified_split(&recs, SplitRatios::default(), seed).unwrap();

            let mut ids: Vec<String> = s.train.iter().chain(&s.validation).chain(&s.holdout)
                .map(|r| r.row_id.clone()).collect();
            let mut expected: Vec<String> = recs.iter().map(|r| r.row_id.clone()).collect();
            ids.sort();
            expected.sort();
            prop_assert_eq!(ids, expected);

            let total = recs.len() as f64;
            for (class, n) in &spec {
                if *n < 10 {
                    continue;
                }
                let overall = *n as f64 / total;
                for part in [&s.train, &s.validation, &s.holdout] {
                    // Floors can leave a partition up to four rows short,
                    // worth 4/len of share; below 200 rows that exceeds 2 points.
                    if part.len() < 200 {
                        continue;
                    }
                    let share = count(part, *class) as f64 / part.len() as f64;
                    prop_assert!((share - overall).abs() <= 0.02,
                        "class {} share {} vs {}", class, share, overall);
                }
            }
        }
    }
}
