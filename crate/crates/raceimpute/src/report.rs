//! Evaluation reports: one JSON document plus flat, plot-ready CSVs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use raceimpute_core::data::{PersonRecord, TractTable};
use raceimpute_core::eval::{aggregate_metrics, confusion, income_bias_table, ConfusionMatrix, IncomeBiasTable, MetricsReport};
use raceimpute_core::{RaceClass, NUM_CLASSES};
use serde::Serialize;

use crate::error::{AppError, AppResult};
use crate::io::{fmt_f64, write_csv};

pub const CONVENTIONS: &str = "precision, recall, F1 and FPR are 0 when their denominator is 0; \
fpr_macro is the unweighted mean of the five class FPRs; fpr_weighted weights each class FPR by its true-class prevalence";

pub const COMPARISON_COLUMNS: [&str; 7] = ["model", "accuracy", "f1", "precision", "recall", "fpr_macro", "fpr_weighted"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelEvaluation {
    pub name: String,
    /// Checksum of the predictions or model behind this section, when known.
    pub source_sha256: Option<String>,
    pub confusion: ConfusionMatrix,
    pub metrics: MetricsReport,
    pub income_bias: IncomeBiasTable,
}

/// Scores aligned predictions against labeled records.
pub fn evaluate_model(
    name: &str,
    source_sha256: Option<String>,
    preds: &[RaceClass],
    records: &[PersonRecord],
    tracts: &TractTable,
    edges: &[f64],
) -> AppResult<ModelEvaluation> {
    let ctx = |e| AppError::core(format!("evaluating {name}"), e);
    let labels: Vec<RaceClass> = records
        .iter()
        .map(|r| r.label.ok_or_else(|| ctx(raceimpute_core::Error::MissingLabel(r.row_id.clone()))))
        .collect::<AppResult<_>>()?;
    let cm = confusion(preds, &labels).map_err(ctx)?;
    let pairs: Vec<(PersonRecord, RaceClass)> = records.iter().cloned().zip(preds.iter().copied()).collect();
    let income_bias = income_bias_table(&pairs, tracts, edges).map_err(ctx)?;
    Ok(ModelEvaluation {
        name: name.to_string(),
        source_sha256,
        metrics: aggregate_metrics(&cm),
        confusion: cm,
        income_bias,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassCount {
    pub race: RaceClass,
    pub n: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetFingerprint {
    pub sha256: Option<String>,
    pub rows: usize,
    pub class_counts: Vec<ClassCount>,
}

impl DatasetFingerprint {
    pub fn of(records: &[PersonRecord], sha256: Option<String>) -> Self {
        let mut counts = [0u64; NUM_CLASSES];
        for r in records {
            if let Some(l) = r.label {
                counts[l.code()] += 1;
            }
        }
        DatasetFingerprint {
            sha256,
            rows: records.len(),
            class_counts: RaceClass::ALL
                .iter()
                .map(|&race| ClassCount {
                    race,
                    n: counts[race.code()],
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub version: String,
    pub conventions: String,
    pub config_sha256: Option<String>,
    pub dataset: DatasetFingerprint,
    pub tracts_sha256: Option<String>,
    pub bin_edges: Vec<f64>,
    pub models: Vec<ModelEvaluation>,
    /// Extra named values, such as the Bayes-optimal ceiling on synthetic data.
    pub notes: Vec<Note>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Note {
    pub name: String,
    pub value: f64,
}

impl Report {
    pub fn new(dataset: DatasetFingerprint, bin_edges: Vec<f64>) -> Self {
        Report {
            version: env!("CARGO_PKG_VERSION").to_string(),
            conventions: CONVENTIONS.to_string(),
            config_sha256: None,
            dataset,
            tracts_sha256: None,
            bin_edges,
            models: Vec::new(),
            notes: Vec::new(),
        }
    }
}

/// File-name-safe version of a model name.
pub fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

pub fn comparison_rows(models: &[ModelEvaluation]) -> Vec<Vec<String>> {
    models
        .iter()
        .map(|m| {
            let r = &m.metrics;
            vec![
                m.name.clone(),
                fmt_f64(r.accuracy),
                fmt_f64(r.weighted_f1),
                fmt_f64(r.weighted_precision),
                fmt_f64(r.weighted_recall),
                fmt_f64(r.fpr_macro),
                fmt_f64(r.fpr_weighted),
            ]
        })
        .collect()
}

fn confusion_rows(cm: &ConfusionMatrix) -> Vec<Vec<String>> {
    RaceClass::ALL
        .iter()
        .map(|&t| {
            let mut row = vec![t.as_str().to_string()];
            row.extend(RaceClass::ALL.iter().map(|&p| cm.cell(t, p).to_string()));
            row
        })
        .collect()
}

fn class_metric_rows(m: &MetricsReport) -> Vec<Vec<String>> {
    RaceClass::ALL
        .iter()
        .map(|&c| {
            let k = &m.per_class[c.code()];
            vec![
                c.as_str().to_string(),
                fmt_f64(k.precision),
                fmt_f64(k.recall),
                fmt_f64(k.f1),
                fmt_f64(k.fpr),
                fmt_f64(m.prevalence[c.code()]),
            ]
        })
        .collect()
}

/// Long format, one row per populated (bin, true class) cell. Open bin
/// edges are empty; the missing-tract bin has `unknown` in both edge columns.
fn income_bias_rows(t: &IncomeBiasTable) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for (bin, cells) in t.bins.iter().zip(&t.cells) {
        let edge = |e: Option<f64>| {
            if bin.unknown {
                "unknown".to_string()
            } else {
                e.map(fmt_f64).unwrap_or_default()
            }
        };
        for c in RaceClass::ALL {
            let cell = &cells[c.code()];
            if cell.n == 0 {
                continue;
            }
            rows.push(vec![edge(bin.low), edge(bin.high), c.as_str().to_string(), fmt_f64(cell.rate()), cell.n.to_string()]);
        }
    }
    rows
}

/// Writes `report.json`, `comparison.csv` and per-model confusion, class
/// metric and income-bias CSVs into `dir`. Returns the written paths in
/// write order.
pub fn emit_report(report: &Report, dir: &Path) -> AppResult<Vec<PathBuf>> {
    if report.models.is_empty() {
        return Err(AppError::Usage("a report needs at least one model".into()));
    }
    let mut stems = BTreeSet::new();
    for m in &report.models {
        if !stems.insert(file_stem(&m.name)) {
            return Err(AppError::Usage(format!("duplicate model name {:?} in report", m.name)));
        }
    }
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let mut written = Vec::new();

    let json_path = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(report).map_err(|e| AppError::Format {
        path: json_path.clone(),
        message: e.to_string(),
    })?;
    text.push('\n');
    fs::write(&json_path, text).map_err(|e| AppError::io(&json_path, e))?;
    written.push(json_path);

    let comparison = dir.join("comparison.csv");
    write_csv(&comparison, &COMPARISON_COLUMNS, comparison_rows(&report.models))?;
    written.push(comparison);

    let mut confusion_header = vec!["true_class"];
    confusion_header.extend(RaceClass::ALL.iter().map(|c| c.as_str()));
    for m in &report.models {
        let stem = file_stem(&m.name);
        let p = dir.join(format!("confusion_{stem}.csv"));
        write_csv(&p, &confusion_header, confusion_rows(&m.confusion))?;
        written.push(p);
        let p = dir.join(format!("class_metrics_{stem}.csv"));
        write_csv(&p, &["race", "precision", "recall", "f1", "fpr", "prevalence"], class_metric_rows(&m.metrics))?;
        written.push(p);
        let p = dir.join(format!("income_bias_{stem}.csv"));
        write_csv(&p, &["bin_low", "bin_high", "race", "rate", "n"], income_bias_rows(&m.income_bias))?;
        written.push(p);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use raceimpute_core::data::{Geoid, TractRow};
    use raceimpute_core::RaceDistribution;

    fn tracts() -> TractTable {
        TractTable::from_rows(vec![
            TractRow {
                geoid: Geoid::parse("01001000100").unwrap(),
                composition: RaceDistribution::UNIFORM,
                median_income: 20_000.0,
            },
            TractRow {
                geoid: Geoid::parse("01001000200").unwrap(),
                composition: RaceDistribution::UNIFORM,
                median_income: 90_000.0,
            },
        ])
        .unwrap()
    }

    fn people() -> Vec<PersonRecord> {
        use RaceClass::*;
        [(White, "01001000100"), (Black, "01001000200"), (Hispanic, "01001000200")]
            .iter()
            .enumerate()
            .map(|(i, (c, g))| PersonRecord::new(i.to_string(), "a", None, "b", Some(Geoid::parse(g).unwrap()), Some(*c)).unwrap())
            .collect()
    }

    fn report(names: &[&str]) -> Report {
        let recs = people();
        let t = tracts();
        let mut r = Report::new(DatasetFingerprint::of(&recs, None), vec![50_000.0]);
        for n in names {
            let preds: Vec<RaceClass> = recs.iter().map(|r| r.label.unwrap()).collect();
            r.models.push(evaluate_model(n, None, &preds, &recs, &t, &[50_000.0]).unwrap());
        }
        r
    }

    #[test]
    fn perfect_predictions_score_one() {
        let r = report(&["m"]);
        assert_eq!(r.models[0].metrics.accuracy, 1.0);
        assert_eq!(r.models[0].metrics.fpr_macro, 0.0);
    }

    #[test]
    fn two_models_in_given_order_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(&["lstm-geo", "bisg"]);
        let files = emit_report(&r, dir.path()).unwrap();
        let cmp = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        let lines: Vec<&str> = cmp.lines().collect();
        assert_eq!(lines[0], "model,accuracy,f1,precision,recall,fpr_macro,fpr_weighted");
        assert!(lines[1].starts_with("lstm-geo,") && lines[2].starts_with("bisg,"));
        let first: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
        emit_report(&r, dir.path()).unwrap();
        let second: Vec<Vec<u8>> = files.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
    }

    #[test]
    fn empty_income_table_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let t = tracts();
        let mut r = Report::new(DatasetFingerprint::of(&[], None), vec![]);
        let mut m = evaluate_model("x", None, &[RaceClass::White], &people()[..1], &t, &[]).unwrap();
        m.income_bias = income_bias_table(&[], &t, &[]).unwrap();
        r.models.push(m);
        emit_report(&r, dir.path()).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("income_bias_x.csv")).unwrap(), "bin_low,bin_high,race,rate,n\n");
    }

    #[test]
    fn bias_rows_use_open_and_unknown_edges() {
        let recs = people();
        let mut with_unknown = recs.clone();
        with_unknown[0].tract_geoid = None;
        let preds = [RaceClass::White, RaceClass::White, RaceClass::Hispanic];
        let m = evaluate_model("x", None, &preds, &with_unknown, &tracts(), &[50_000.0]).unwrap();
        let rows = income_bias_rows(&m.income_bias);
        assert_eq!(rows[0], vec!["50000", "", "black", "1", "1"]);
        assert_eq!(rows[1], vec!["50000", "", "hispanic", "0", "1"]);
        assert_eq!(rows[2], vec!["unknown", "unknown", "white", "0", "1"]);
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&report(&["a b", "a_b"]), dir.path()).is_err());
        assert!(emit_report(&report(&[]), dir.path()).is_err());
    }
}
