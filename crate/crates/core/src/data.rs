//! Record types, name-prior and tract tables, source-code mapping and income deciles.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::names::normalize_name;
use crate::race::{RaceClass, RaceDistribution, NUM_CLASSES};

/// Laplace smoothing strength used by [`NamePriorTable::lookup`].
pub const PRIOR_SMOOTHING_ALPHA: f64 = 1.0;

/// Percent rows may deviate this far from 100 before they are rejected.
pub const PERCENT_SUM_TOLERANCE: f64 = 0.5;

/// 11-digit census tract identifier: state (2) + county (3) + tract (6).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct Geoid(String);

impl Geoid {
    pub fn parse(s: &str) -> Result<Geoid> {
        let s = s.trim();
        if s.len() == 11 && s.bytes().all(|b| b.is_ascii_digit()) {
            Ok(Geoid(s.into()))
        } else {
            Err(Error::Invariant(format!("geoid {s:?} is not 11 decimal digits")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Geoid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for Geoid {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let s = <&str>::deserialize(d)?;
        Geoid::parse(s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub row_id: String,
    pub first: String,
    pub middle: Option<String>,
    pub last: String,
    pub tract_geoid: Option<Geoid>,
    pub label: Option<RaceClass>,
}

impl PersonRecord {
    pub fn new(
        row_id: impl Into<String>,
        first: impl Into<String>,
        middle: Option<String>,
        last: impl Into<String>,
        tract_geoid: Option<Geoid>,
        label: Option<RaceClass>,
    ) -> Result<Self> {
        let last = last.into();
        if last.trim().is_empty() {
            return Err(Error::EmptyLastName);
        }
        Ok(PersonRecord {
            row_id: row_id.into(),
            first: first.into(),
            middle: middle.filter(|m| !m.trim().is_empty()),
            last,
            tract_geoid,
            label,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TractRecord {
    pub geoid: Geoid,
    pub composition: RaceDistribution,
    pub median_income: f64,
    pub income_decile: u8,
}

impl TractRecord {
    /// Income decile mapped onto `[0, 1]` as `(d - 1) / 9`.
    pub fn scaled_decile(&self) -> f64 {
        scale_decile(self.income_decile)
    }
}

pub fn scale_decile(decile: u8) -> f64 {
    (f64::from(decile) - 1.0) / 9.0
}

/// Decile by rank over the whole table: `floor(10 * rank / n) + 1`, capped at 10.
/// Ranks order by income, then by geoid.
pub fn income_deciles(rows: &[(Geoid, f64)]) -> Vec<u8> {
    let n = rows.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        rows[a]
            .1
            .total_cmp(&rows[b].1)
            .then_with(|| rows[a].0.cmp(&rows[b].0))
    });
    let mut deciles = alloc::vec![0u8; n];
    for (rank, &idx) in order.iter().enumerate() {
        deciles[idx] = ((10 * rank / n) + 1).min(10) as u8;
    }
    deciles
}

/// One parsed tract row before deciles are assigned.
#[derive(Debug, Clone)]
pub struct TractRow {
    pub geoid: Geoid,
    pub composition: RaceDistribution,
    pub median_income: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TractTable {
    tracts: BTreeMap<Geoid, TractRecord>,
}

impl TractTable {
    pub fn from_rows(rows: Vec<TractRow>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for row in &rows {
            if !seen.insert(row.geoid.clone()) {
                return Err(Error::DuplicateGeoid(row.geoid.to_string()));
            }
            if !(row.median_income.is_finite() && row.median_income >= 0.0) {
                return Err(Error::Invariant(format!(
                    "median income for {} must be finite and non-negative",
                    row.geoid
                )));
            }
        }
        let keyed: Vec<(Geoid, f64)> = rows
            .iter()
            .map(|r| (r.geoid.clone(), r.median_income))
            .collect();
        let deciles = income_deciles(&keyed);
        let tracts = rows
            .into_iter()
            .zip(deciles)
            .map(|(r, income_decile)| {
                (
                    r.geoid.clone(),
                    TractRecord {
                        geoid: r.geoid,
                        composition: r.composition,
                        median_income: r.median_income,
                        income_decile,
                    },
                )
            })
            .collect();
        Ok(TractTable { tracts })
    }

    pub fn get(&self, geoid: &Geoid) -> Option<&TractRecord> {
        self.tracts.get(geoid)
    }

    pub fn len(&self) -> usize {
        self.tracts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracts.is_empty()
    }

    /// Tracts in geoid order.
    pub fn iter(&self) -> impl Iterator<Item = &TractRecord> {
        self.tracts.values()
    }

    /// Unweighted mean composition and mean scaled decile over the table.
    /// Falls back to uniform shares and the middle decile when empty.
    pub fn mean_features(&self) -> (RaceDistribution, f64) {
        if self.tracts.is_empty() {
            return (RaceDistribution::UNIFORM, 0.5);
        }
        let mut acc = [0.0; NUM_CLASSES];
        let mut dec = 0.0;
        for t in self.tracts.values() {
            for (a, p) in acc.iter_mut().zip(t.composition.probs()) {
                *a += p;
            }
            dec += t.scaled_decile();
        }
        let n = self.tracts.len() as f64;
        let comp = RaceDistribution::from_weights(acc).unwrap_or(RaceDistribution::UNIFORM);
        (comp, dec / n)
    }

    /// Lower income edges of deciles 2..=10, deduplicated; the default
    /// bin edges for income-binned analysis.
    pub fn decile_income_edges(&self) -> Vec<f64> {
        let mut lows = [f64::INFINITY; 10];
        for t in self.tracts.values() {
            let d = usize::from(t.income_decile - 1);
            lows[d] = lows[d].min(t.median_income);
        }
        let mut edges: Vec<f64> = Vec::new();
        for &low in &lows[1..] {
            if low.is_finite() && edges.last().is_none_or(|&e| low > e) {
                edges.push(low);
            }
        }
        edges
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NamePrior {
    pub dist: RaceDistribution,
    pub count: u64,
}

/// One name row with percentage columns (0..100) as found in census name files.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorRow {
    pub name: String,
    pub percents: [f64; NUM_CLASSES],
    pub count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NameKind {
    Surname,
    Firstname,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamePriorTable {
    pub kind: NameKind,
    entries: BTreeMap<String, NamePrior>,
    marginal: RaceDistribution,
}

impl NamePriorTable {
    pub fn new(kind: NameKind, marginal: RaceDistribution) -> Result<Self> {
        if !marginal.is_strictly_positive() {
            return Err(Error::InvalidMarginal);
        }
        Ok(NamePriorTable {
            kind,
            entries: BTreeMap::new(),
            marginal,
        })
    }

    /// Builds a table from percent rows. Row numbers in errors are 1-based.
    /// Names that collide after normalization are merged count-weighted.
    pub fn from_percent_rows(
        kind: NameKind,
        rows: &[PriorRow],
        marginal: RaceDistribution,
    ) -> Result<Self> {
        let mut table = NamePriorTable::new(kind, marginal)?;
        for (i, row) in rows.iter().enumerate() {
            let sum: f64 = row.percents.iter().sum();
            if row.percents.iter().any(|p| !p.is_finite() || *p < 0.0)
                || (sum - 100.0).abs() > PERCENT_SUM_TOLERANCE
            {
                return Err(Error::Invariant(format!(
                    "row {}: percents for {:?} sum to {sum}, outside 100 ± {PERCENT_SUM_TOLERANCE}",
                    i + 1,
                    row.name
                )));
            }
            let dist = RaceDistribution::from_weights(row.percents)?;
            table.insert(&row.name, dist, row.count);
        }
        Ok(table)
    }

    pub fn insert(&mut self, name: &str, dist: RaceDistribution, count: u64) {
        let key = normalize_name(name);
        match self.entries.get_mut(&key) {
            Some(existing) if existing.count + count > 0 => {
                let (a, b) = (existing.count as f64, count as f64);
                let mut w = [0.0; NUM_CLASSES];
                for (k, slot) in w.iter_mut().enumerate() {
                    *slot = (a * existing.dist.probs()[k] + b * dist.probs()[k]) / (a + b);
                }
                existing.dist = RaceDistribution::from_weights(w).unwrap_or(dist);
                existing.count += count;
            }
            _ => {
                self.entries.insert(key, NamePrior { dist, count });
            }
        }
    }

    pub fn marginal(&self) -> &RaceDistribution {
        &self.marginal
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, name: &str) -> Option<&NamePrior> {
        self.entries.get(&normalize_name(name))
    }

    /// Entries in normalized-name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &NamePrior)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// `P(race | name)`, smoothed toward the marginal:
    /// `(count * p + alpha * marginal) / (count + alpha)`.
    /// Unknown names get the marginal.
    pub fn lookup(&self, name: &str) -> RaceDistribution {
        match self.entry(name) {
            None => self.marginal,
            Some(prior) => smooth_prior(prior, &self.marginal, PRIOR_SMOOTHING_ALPHA),
        }
    }

    /// Count-weighted mean of the stored distributions; `None` when no
    /// entry carries a positive count.
    pub fn implied_marginal(&self) -> Option<RaceDistribution> {
        let mut acc = [0.0; NUM_CLASSES];
        for prior in self.entries.values() {
            for (a, p) in acc.iter_mut().zip(prior.dist.probs()) {
                *a += prior.count as f64 * p;
            }
        }
        RaceDistribution::from_weights(acc).ok()
    }
}

pub fn smooth_prior(prior: &NamePrior, marginal: &RaceDistribution, alpha: f64) -> RaceDistribution {
    let n = prior.count as f64;
    let mut w = [0.0; NUM_CLASSES];
    for (k, slot) in w.iter_mut().enumerate() {
        *slot = (n * prior.dist.probs()[k] + alpha * marginal.probs()[k]) / (n + alpha);
    }
    // Renormalize away rounding drift.
    RaceDistribution::from_weights(w).unwrap_or(*marginal)
}

fn normalize_code(code: &str) -> String {
    let mut out = String::new();
    for word in code.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&word.to_lowercase());
    }
    out
}

/// Maps a source vocabulary of race codes onto the five classes. Codes in
/// `declared` are recognized but carry no class of their own and map to Other.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RaceMapping {
    #[serde(default)]
    codes: BTreeMap<String, RaceClass>,
    #[serde(default)]
    declared: BTreeSet<String>,
}

impl RaceMapping {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_code(mut self, code: &str, class: RaceClass) -> Self {
        self.codes.insert(normalize_code(code), class);
        self
    }

    pub fn with_declared(mut self, code: &str) -> Self {
        self.declared.insert(normalize_code(code));
        self
    }

    /// Canonical class names plus the common long-form voter-file labels.
    pub fn voter_file_default() -> Self {
        let mut m = RaceMapping::new();
        for c in RaceClass::ALL {
            m = m.with_code(c.as_str(), c);
        }
        m.with_code("White, Not Hispanic", RaceClass::White)
            .with_code("Black, Not Hispanic", RaceClass::Black)
            .with_code("Asian or Pacific Islander", RaceClass::Asian)
            .with_code("Asian/Pacific Islander", RaceClass::Asian)
            .with_code("American Indian or Alaska Native", RaceClass::Other)
            .with_code("American Indian/Alaska Native", RaceClass::Other)
            .with_code("Multiracial", RaceClass::Other)
            .with_code("Two or More Races", RaceClass::Other)
    }

    /// Re-keys codes through the normalization used by [`RaceMapping::map`];
    /// needed after deserializing a hand-written config.
    pub fn normalized(self) -> Self {
        RaceMapping {
            codes: self
                .codes
                .into_iter()
                .map(|(k, v)| (normalize_code(&k), v))
                .collect(),
            declared: self.declared.iter().map(|k| normalize_code(k)).collect(),
        }
    }

    pub fn map(&self, source_code: &str) -> Result<RaceClass> {
        let key = normalize_code(source_code);
        if let Some(c) = self.codes.get(&key) {
            Ok(*c)
        } else if self.declared.contains(&key) {
            Ok(RaceClass::Other)
        } else {
            Err(Error::UnknownSourceCode(source_code.into()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn geoid(i: usize) -> Geoid {
        Geoid::parse(&format!("{:011}", 37_000_000_000usize + i)).unwrap()
    }

    fn approx(a: &RaceDistribution, b: [f64; 5], tol: f64) {
        for (x, y) in a.probs().iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn geoid_requires_eleven_digits() {
        assert!(Geoid::parse("37063001502").is_ok());
        assert!(Geoid::parse("3706300150").is_err());
        assert!(Geoid::parse("3706300150a").is_err());
    }

    #[test]
    fn person_record_rejects_blank_surname() {
        assert_eq!(
            PersonRecord::new("1", "ann", None, "  ", None, None),
            Err(Error::EmptyLastName)
        );
    }

    #[test]
    fn maps_source_codes() {
        let m = RaceMapping::voter_file_default().with_declared("Unknown Other");
        assert_eq!(m.map("Hispanic").unwrap(), RaceClass::Hispanic);
        assert_eq!(m.map("American Indian or Alaska Native").unwrap(), RaceClass::Other);
        assert_eq!(m.map("  multiracial ").unwrap(), RaceClass::Other);
        assert_eq!(m.map("unknown  OTHER").unwrap(), RaceClass::Other);
        assert_eq!(m.map("ZZ"), Err(Error::UnknownSourceCode("ZZ".into())));
    }

    #[test]
    fn percent_rows_rescale_and_validate() {
        let marginal = RaceDistribution::new([0.6, 0.13, 0.18, 0.06, 0.03]).unwrap();
        let rows = vec![
            PriorRow {
                name: "Garcia".into(),
                percents: [5.0, 0.5, 92.0, 1.5, 1.0],
                count: 100_000,
            },
            PriorRow {
                name: "Lee".into(),
                percents: [40.0, 20.0, 10.0, 30.0, 0.4],
                count: 10,
            },
        ];
        let t = NamePriorTable::from_percent_rows(NameKind::Surname, &rows, marginal).unwrap();
        approx(&t.entry("GARCIA").unwrap().dist, [0.05, 0.005, 0.92, 0.015, 0.01], 1e-12);
        let lee = t.entry("lee").unwrap().dist;
        assert!((lee.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        approx(&lee, [40.0 / 100.4, 20.0 / 100.4, 10.0 / 100.4, 30.0 / 100.4, 0.4 / 100.4], 1e-12);

        let bad = vec![PriorRow {
            name: "x".into(),
            percents: [50.0, 20.0, 20.0, 5.0, 2.0],
            count: 1,
        }];
        assert!(matches!(
            NamePriorTable::from_percent_rows(NameKind::Surname, &bad, marginal),
            Err(Error::Invariant(_))
        ));
    }

    #[test]
    fn lookup_smooths_toward_marginal() {
        let marginal = RaceDistribution::new([0.6, 0.13, 0.18, 0.06, 0.03]).unwrap();
        let mut t = NamePriorTable::new(NameKind::Surname, marginal).unwrap();
        t.insert("Solo", RaceDistribution::one_hot(RaceClass::White), 9);
        t.insert("Common", RaceDistribution::new([0.1, 0.2, 0.3, 0.2, 0.2]).unwrap(), u64::MAX / 4);
        // (9 * onehot + marginal) / 10
        approx(&t.lookup("solo"), [0.96, 0.013, 0.018, 0.006, 0.003], 1e-12);
        approx(&t.lookup("common"), [0.1, 0.2, 0.3, 0.2, 0.2], 1e-12);
        assert_eq!(t.lookup("absent"), marginal);
    }

    #[test]
    fn marginal_must_be_positive() {
        let m = RaceDistribution::one_hot(RaceClass::White);
        assert_eq!(NamePriorTable::new(NameKind::Surname, m), Err(Error::InvalidMarginal));
    }

    #[test]
    fn deciles_follow_rank() {
        let rows: Vec<_> = (0..10).map(|i| (geoid(i), 1000.0 * (10 - i) as f64)).collect();
        let mut d = income_deciles(&rows);
        assert_eq!(d[0], 10);
        d.sort();
        assert_eq!(d, (1..=10).collect::<Vec<u8>>());

        // ties resolved by geoid order
        let tied: Vec<_> = (0..10).rev().map(|i| (geoid(i), 5.0)).collect();
        let d = income_deciles(&tied);
        assert_eq!(d, (1..=10).rev().collect::<Vec<u8>>());

        // 20 tracts: brute-force rank of the 3rd-lowest income
        let incomes: Vec<f64> = (0..20).map(|i| ((i * 7919) % 20) as f64 * 1000.0 + 17.0).collect();
        let rows: Vec<_> = incomes.iter().enumerate().map(|(i, &x)| (geoid(i), x)).collect();
        let d = income_deciles(&rows);
        let mut sorted = incomes.clone();
        sorted.sort_by(f64::total_cmp);
        let third = incomes.iter().position(|&x| x == sorted[2]).unwrap();
        assert_eq!(d[third], 2);
    }

    #[test]
    fn tract_table_rejects_duplicates() {
        let row = TractRow {
            geoid: geoid(1),
            composition: RaceDistribution::UNIFORM,
            median_income: 5.0,
        };
        assert_eq!(
            TractTable::from_rows(vec![row.clone(), row]),
            Err(Error::DuplicateGeoid(geoid(1).to_string()))
        );
    }

    #[test]
    fn decile_edges_are_increasing() {
        let rows: Vec<_> = (0..40)
            .map(|i| TractRow {
                geoid: geoid(i),
                composition: RaceDistribution::UNIFORM,
                median_income: (i * 1000) as f64,
            })
            .collect();
        let t = TractTable::from_rows(rows).unwrap();
        let edges = t.decile_income_edges();
        assert_eq!(edges.len(), 9);
        assert_eq!(edges[0], 4000.0);
        assert!(edges.windows(2).all(|w| w[0] < w[1]));
    }
}
