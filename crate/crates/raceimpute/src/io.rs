//! CSV formats for people, tracts, name priors, marginals and predictions.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use raceimpute_core::data::{
    Geoid, NameKind, NamePriorTable, PersonRecord, PriorRow, RaceMapping, TractRow, TractTable,
    PERCENT_SUM_TOLERANCE,
};
use raceimpute_core::{RaceClass, RaceDistribution, NUM_CLASSES};
use serde::Deserialize;

use crate::error::{AppError, AppResult};

pub const PCT_COLUMNS: [&str; NUM_CLASSES] = ["pct_white", "pct_black", "pct_hispanic", "pct_asian", "pct_other"];
pub const PROB_COLUMNS: [&str; NUM_CLASSES] = ["p_white", "p_black", "p_hispanic", "p_asian", "p_other"];
pub const PEOPLE_COLUMNS: [&str; 6] = ["row_id", "first", "middle", "last", "tract_geoid", "race"];

/// File names inside a dataset directory.
pub const PEOPLE_FILE: &str = "people.csv";
pub const TRACTS_FILE: &str = "tracts.csv";
pub const SURNAMES_FILE: &str = "surnames.csv";
pub const FIRSTNAMES_FILE: &str = "firstnames.csv";
pub const MARGINAL_FILE: &str = "marginal.csv";

fn reader(path: &Path) -> AppResult<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| AppError::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn line_of(err: &csv::Error, fallback: usize) -> usize {
    err.position().map_or(fallback, |p| p.line() as usize)
}

fn parse_err(path: &Path, row: usize, message: impl Into<String>) -> AppError {
    AppError::Parse {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

/// Rows of a CSV file deserialized by header name; `row` in errors is the
/// 1-based data row.
fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> AppResult<Vec<T>> {
    let mut rdr = reader(path)?;
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<T>().enumerate() {
        match row {
            Ok(r) => out.push(r),
            Err(e) => {
                let line = line_of(&e, i + 2);
                return Err(parse_err(path, line.saturating_sub(1).max(1), e.to_string()));
            }
        }
    }
    Ok(out)
}

fn percent_weights(path: &Path, row: usize, percents: [f64; NUM_CLASSES]) -> AppResult<RaceDistribution> {
    let sum: f64 = percents.iter().sum();
    if percents.iter().any(|p| !p.is_finite() || *p < 0.0) || (sum - 100.0).abs() > PERCENT_SUM_TOLERANCE {
        return Err(parse_err(
            path,
            row,
            format!("percent columns sum to {sum}, outside 100 ± {PERCENT_SUM_TOLERANCE}"),
        ));
    }
    RaceDistribution::from_weights(percents).map_err(|e| parse_err(path, row, e.to_string()))
}

#[derive(Deserialize)]
struct RawPerson {
    row_id: String,
    #[serde(default)]
    first: String,
    #[serde(default)]
    middle: Option<String>,
    last: String,
    #[serde(default)]
    tract_geoid: Option<String>,
    #[serde(default)]
    race: Option<String>,
}

fn non_empty(s: Option<String>) -> Option<String> {
    s.filter(|v| !v.trim().is_empty())
}

/// Reads `row_id,first,middle,last,tract_geoid,race`. Only `row_id` and
/// `last` are required columns; an empty `race` cell leaves the row unlabeled.
pub fn read_people(path: &Path, mapping: &RaceMapping) -> AppResult<Vec<PersonRecord>> {
    let raw: Vec<RawPerson> = read_rows(path)?;
    let mut seen = BTreeSet::new();
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let row = i + 1;
            if !seen.insert(r.row_id.clone()) {
                return Err(parse_err(path, row, format!("duplicate row_id {:?}", r.row_id)));
            }
            let tract = non_empty(r.tract_geoid)
                .map(|g| Geoid::parse(&g))
                .transpose()
                .map_err(|e| parse_err(path, row, e.to_string()))?;
            let label = non_empty(r.race)
                .map(|code| mapping.map(&code))
                .transpose()
                .map_err(|e| parse_err(path, row, e.to_string()))?;
            PersonRecord::new(r.row_id, r.first, non_empty(r.middle), r.last, tract, label)
                .map_err(|e| parse_err(path, row, e.to_string()))
        })
        .collect()
}

pub fn write_people(path: &Path, records: &[PersonRecord]) -> AppResult<()> {
    write_csv(
        path,
        &PEOPLE_COLUMNS,
        records.iter().map(|r| {
            vec![
                r.row_id.clone(),
                r.first.clone(),
                r.middle.clone().unwrap_or_default(),
                r.last.clone(),
                r.tract_geoid.as_ref().map(|g| g.to_string()).unwrap_or_default(),
                r.label.map(|c| c.as_str().to_string()).unwrap_or_default(),
            ]
        }),
    )
}

/// Loads a TOML race-code mapping of the form
/// `[codes] "W" = "white"` plus an optional `declared = ["AI", ...]` list.
pub fn read_race_mapping(path: &Path) -> AppResult<RaceMapping> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    let mapping: RaceMapping = toml::from_str(&text).map_err(|e| AppError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(mapping.normalized())
}

#[derive(Deserialize)]
struct RawTract {
    geoid: String,
    pct_white: f64,
    pct_black: f64,
    pct_hispanic: f64,
    pct_asian: f64,
    pct_other: f64,
    median_income: f64,
}

pub fn read_tracts(path: &Path) -> AppResult<TractTable> {
    let raw: Vec<RawTract> = read_rows(path)?;
    let rows = raw
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let row = i + 1;
            Ok(TractRow {
                geoid: Geoid::parse(&r.geoid).map_err(|e| parse_err(path, row, e.to_string()))?,
                composition: percent_weights(
                    path,
                    row,
                    [r.pct_white, r.pct_black, r.pct_hispanic, r.pct_asian, r.pct_other],
                )?,
                median_income: r.median_income,
            })
        })
        .collect::<AppResult<Vec<_>>>()?;
    TractTable::from_rows(rows).map_err(|e| AppError::core(path.display().to_string(), e))
}

fn percents_of(d: &RaceDistribution) -> impl Iterator<Item = String> + '_ {
    d.probs().iter().map(|p| fmt_f64(p * 100.0))
}

pub fn write_tracts(path: &Path, tracts: &TractTable) -> AppResult<()> {
    let mut header = vec!["geoid"];
    header.extend(PCT_COLUMNS);
    header.push("median_income");
    write_csv(
        path,
        &header,
        tracts.iter().map(|t| {
            let mut row = vec![t.geoid.to_string()];
            row.extend(percents_of(&t.composition));
            row.push(fmt_f64(t.median_income));
            row
        }),
    )
}

#[derive(Deserialize)]
struct RawPrior {
    name: String,
    pct_white: f64,
    pct_black: f64,
    pct_hispanic: f64,
    pct_asian: f64,
    pct_other: f64,
    count: u64,
}

pub fn read_name_priors(path: &Path, kind: NameKind, marginal: RaceDistribution) -> AppResult<NamePriorTable> {
    let raw: Vec<RawPrior> = read_rows(path)?;
    let rows: Vec<PriorRow> = raw
        .into_iter()
        .map(|r| PriorRow {
            name: r.name,
            percents: [r.pct_white, r.pct_black, r.pct_hispanic, r.pct_asian, r.pct_other],
            count: r.count,
        })
        .collect();
    NamePriorTable::from_percent_rows(kind, &rows, marginal).map_err(|e| AppError::core(path.display().to_string(), e))
}

pub fn write_name_priors(path: &Path, table: &NamePriorTable) -> AppResult<()> {
    let mut header = vec!["name"];
    header.extend(PCT_COLUMNS);
    header.push("count");
    write_csv(
        path,
        &header,
        table.iter().map(|(name, prior)| {
            let mut row = vec![name.to_string()];
            row.extend(percents_of(&prior.dist));
            row.push(prior.count.to_string());
            row
        }),
    )
}

/// One data row of `pct_white..pct_other`.
pub fn read_marginal(path: &Path) -> AppResult<RaceDistribution> {
    #[derive(Deserialize)]
    struct RawMarginal {
        pct_white: f64,
        pct_black: f64,
        pct_hispanic: f64,
        pct_asian: f64,
        pct_other: f64,
    }
    let rows: Vec<RawMarginal> = read_rows(path)?;
    match rows.as_slice() {
        [r] => percent_weights(path, 1, [r.pct_white, r.pct_black, r.pct_hispanic, r.pct_asian, r.pct_other]),
        _ => Err(parse_err(path, rows.len().max(1), "expected exactly one data row")),
    }
}

pub fn write_marginal(path: &Path, marginal: &RaceDistribution) -> AppResult<()> {
    write_csv(path, &PCT_COLUMNS, std::iter::once(percents_of(marginal).collect()))
}

/// Prediction output row.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub row_id: String,
    pub dist: RaceDistribution,
    pub predicted: RaceClass,
    pub imputed_geo: bool,
    pub degenerate: bool,
}

pub fn prediction_header() -> Vec<&'static str> {
    let mut h = vec!["row_id"];
    h.extend(PROB_COLUMNS);
    h.extend(["predicted_class", "imputed_geo", "degenerate_posterior"]);
    h
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> AppResult<()> {
    write_csv(
        path,
        &prediction_header(),
        rows.iter().map(|r| {
            let mut row = vec![r.row_id.clone()];
            row.extend(r.dist.probs().iter().map(|p| fmt_f64(*p)));
            row.push(r.predicted.as_str().to_string());
            row.push(r.imputed_geo.to_string());
            row.push(r.degenerate.to_string());
            row
        }),
    )
}

pub fn read_predictions(path: &Path) -> AppResult<Vec<PredictionRow>> {
    #[derive(Deserialize)]
    struct RawPrediction {
        row_id: String,
        p_white: f64,
        p_black: f64,
        p_hispanic: f64,
        p_asian: f64,
        p_other: f64,
        predicted_class: String,
        #[serde(default)]
        imputed_geo: bool,
        #[serde(default)]
        degenerate_posterior: bool,
    }
    let raw: Vec<RawPrediction> = read_rows(path)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let row = i + 1;
            let dist = RaceDistribution::new([r.p_white, r.p_black, r.p_hispanic, r.p_asian, r.p_other])
                .map_err(|e| parse_err(path, row, e.to_string()))?;
            let predicted = r
                .predicted_class
                .parse()
                .map_err(|e: raceimpute_core::Error| parse_err(path, row, e.to_string()))?;
            Ok(PredictionRow {
                row_id: r.row_id,
                dist,
                predicted,
                imputed_geo: r.imputed_geo,
                degenerate: r.degenerate_posterior,
            })
        })
        .collect()
}

/// Shortest representation that parses back to the same value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> AppResult<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| AppError::io(parent, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| AppError::csv(path, e))?;
    w.write_record(header).map_err(|e| AppError::csv(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| AppError::csv(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

/// Table files expected in a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetPaths {
    pub people: PathBuf,
    pub tracts: PathBuf,
    pub surnames: PathBuf,
    pub firstnames: PathBuf,
    pub marginal: PathBuf,
}

impl DatasetPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DatasetPaths {
            people: dir.join(PEOPLE_FILE),
            tracts: dir.join(TRACTS_FILE),
            surnames: dir.join(SURNAMES_FILE),
            firstnames: dir.join(FIRSTNAMES_FILE),
            marginal: dir.join(MARGINAL_FILE),
        }
    }
}
