//! Confusion matrices, per-class and aggregate classification metrics, and
//! misclassification rates binned by tract median income.
//!
//! Zero denominators yield 0 rather than NaN so every report stays numeric.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{PersonRecord, TractTable};
use crate::error::{Error, Result};
use crate::race::{RaceClass, NUM_CLASSES};

/// Rows are the true class, columns the predicted class.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(preds: &[RaceClass], labels: &[RaceClass]) -> Result<Self> {
        if preds.len() != labels.len() {
            return Err(Error::LengthMismatch {
                preds: preds.len(),
                labels: labels.len(),
            });
        }
        if preds.is_empty() {
            return Err(Error::Empty);
        }
        let mut cm = ConfusionMatrix::default();
        for (p, l) in preds.iter().zip(labels) {
            cm.record(*l, *p);
        }
        Ok(cm)
    }

    pub fn record(&mut self, truth: RaceClass, pred: RaceClass) {
        self.counts[truth.code()][pred.code()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn cell(&self, truth: RaceClass, pred: RaceClass) -> u64 {
        self.counts[truth.code()][pred.code()]
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_total(&self, truth: RaceClass) -> u64 {
        self.counts[truth.code()].iter().sum()
    }

    pub fn col_total(&self, pred: RaceClass) -> u64 {
        self.counts.iter().map(|row| row[pred.code()]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }
}

pub fn confusion(preds: &[RaceClass], labels: &[RaceClass]) -> Result<ConfusionMatrix> {
    ConfusionMatrix::from_pairs(preds, labels)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub fpr: f64,
}

pub fn class_metrics(cm: &ConfusionMatrix, class: RaceClass) -> ClassMetrics {
    let tp = cm.cell(class, class);
    let fp = cm.col_total(class) - tp;
    let fn_ = cm.row_total(class) - tp;
    let tn = cm.total() - tp - fp - fn_;
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    ClassMetrics {
        precision,
        recall,
        f1,
        fpr: ratio(fp, fp + tn),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: u64,
    pub accuracy: f64,
    pub per_class: [ClassMetrics; NUM_CLASSES],
    /// True-class share of each class.
    pub prevalence: [f64; NUM_CLASSES],
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    /// Unweighted mean of the five class FPRs.
    pub fpr_macro: f64,
    /// Prevalence-weighted mean of the class FPRs.
    pub fpr_weighted: f64,
}

pub fn aggregate_metrics(cm: &ConfusionMatrix) -> MetricsReport {
    let n = cm.total();
    let per_class = RaceClass::ALL.map(|c| class_metrics(cm, c));
    let prevalence = RaceClass::ALL.map(|c| ratio(cm.row_total(c), n));
    let weighted = |f: fn(&ClassMetrics) -> f64| -> f64 {
        per_class.iter().zip(&prevalence).map(|(m, w)| w * f(m)).sum()
    };
    MetricsReport {
        n,
        accuracy: cm.accuracy(),
        per_class,
        prevalence,
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        fpr_macro: per_class.iter().map(|m| m.fpr).sum::<f64>() / NUM_CLASSES as f64,
        fpr_weighted: weighted(|m| m.fpr),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncomeBin {
    /// Inclusive lower edge; `None` is unbounded.
    pub low: Option<f64>,
    /// Exclusive upper edge; `None` is unbounded.
    pub high: Option<f64>,
    /// Records whose tract is missing or not in the table.
    pub unknown: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasCell {
    pub n: u64,
    pub misclassified: u64,
    /// Misclassified records broken down by the class they were given.
    pub predicted_as: [u64; NUM_CLASSES],
}

impl BiasCell {
    pub fn rate(&self) -> f64 {
        ratio(self.misclassified, self.n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncomeBiasTable {
    pub edges: Vec<f64>,
    /// One entry per bin: `edges.len() + 1` income bins followed by the unknown bin.
    pub bins: Vec<IncomeBin>,
    /// `cells[bin][true class]`
    pub cells: Vec<[BiasCell; NUM_CLASSES]>,
}

impl IncomeBiasTable {
    pub fn rate(&self, bin: usize, class: RaceClass) -> f64 {
        self.cells[bin][class.code()].rate()
    }

    /// Share of non-`target` records in `bin` predicted as `target`.
    pub fn misclassified_as_rate(&self, bin: usize, target: RaceClass) -> f64 {
        let mut hits = 0;
        let mut n = 0;
        for c in RaceClass::ALL.into_iter().filter(|c| *c != target) {
            let cell = &self.cells[bin][c.code()];
            hits += cell.predicted_as[target.code()];
            n += cell.n;
        }
        ratio(hits, n)
    }

    pub fn class_totals(&self) -> [u64; NUM_CLASSES] {
        let mut totals = [0; NUM_CLASSES];
        for row in &self.cells {
            for (t, cell) in totals.iter_mut().zip(row) {
                *t += cell.n;
            }
        }
        totals
    }
}

/// Bins labeled records by their tract's median income. Bin `i` covers
/// `[edges[i-1], edges[i])`; the first and last bins are open-ended.
pub fn income_bias_table(
    records: &[(PersonRecord, RaceClass)],
    tracts: &TractTable,
    edges: &[f64],
) -> Result<IncomeBiasTable> {
    if edges.windows(2).any(|w| !(w[0] < w[1])) || edges.iter().any(|e| !e.is_finite()) {
        return Err(Error::UnsortedBinEdges);
    }
    let mut bins: Vec<IncomeBin> = (0..=edges.len())
        .map(|i| IncomeBin {
            low: i.checked_sub(1).map(|j| edges[j]),
            high: edges.get(i).copied(),
            unknown: false,
        })
        .collect();
    bins.push(IncomeBin {
        low: None,
        high: None,
        unknown: true,
    });
    let unknown_bin = bins.len() - 1;
    let mut cells = alloc::vec![[BiasCell::default(); NUM_CLASSES]; bins.len()];

    for (record, pred) in records {
        let label = record
            .label
            .ok_or_else(|| Error::MissingLabel(record.row_id.clone()))?;
        let bin = match record.tract_geoid.as_ref().and_then(|g| tracts.get(g)) {
            Some(t) => edges.partition_point(|e| *e <= t.median_income),
            None => unknown_bin,
        };
        let cell = &mut cells[bin][label.code()];
        cell.n += 1;
        if *pred != label {
            cell.misclassified += 1;
            cell.predicted_as[pred.code()] += 1;
        }
    }

    Ok(IncomeBiasTable {
        edges: edges.to_vec(),
        bins,
        cells,
    })
}
