//! Synthetic labeled populations with a fully known generative model.
//!
//! Chain: race ~ prevalences; tract ~ P(tract | race) implied by the tract
//! compositions (optionally tilted toward high-income tracts for minority
//! classes); surname and first name ~ per-class letter models. Because every
//! conditional is explicit, the Bayes-optimal posterior is enumerable.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Geoid, NameKind, NamePriorTable, PersonRecord, TractRow, TractTable};
use crate::error::{Error, Result};
use crate::names::normalize_name;
use crate::race::{RaceClass, RaceDistribution, NUM_CLASSES};

pub const ALPHABET: usize = 26;
/// First letter, interior letters, last letter.
pub const BUCKETS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndependenceMode {
    Independent,
    /// Minority classes live preferentially in high-income tracts while the
    /// emitted tract compositions stay nominal.
    SesConfounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorTableSource {
    /// `P(race | name)` computed from the generator's own parameters.
    Exact,
    /// Class frequencies counted in the generated sample.
    Estimated,
}

/// Per-class name model: a length drawn uniformly from `min_len..=max_len`,
/// then each letter drawn independently from the table of its position
/// bucket (first, interior, last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameModel {
    pub min_len: [usize; NUM_CLASSES],
    pub max_len: [usize; NUM_CLASSES],
    /// `weights[class][bucket][letter]`, unnormalized, non-negative.
    pub weights: Vec<[[f64; ALPHABET]; BUCKETS]>,
}

fn bucket(pos: usize, len: usize) -> usize {
    if pos == 0 {
        0
    } else if pos + 1 == len {
        2
    } else {
        1
    }
}

impl NameModel {
    /// Every class shares one table, so names carry no class information.
    pub fn uninformative(min_len: usize, max_len: usize) -> Self {
        NameModel {
            min_len: [min_len; NUM_CLASSES],
            max_len: [max_len; NUM_CLASSES],
            weights: vec![[[1.0; ALPHABET]; BUCKETS]; NUM_CLASSES],
        }
    }

    /// Each class draws from its own block of letters, so names identify
    /// the class exactly.
    pub fn disjoint(min_len: usize, max_len: usize) -> Self {
        let weights = (0..NUM_CLASSES)
            .map(|c| {
                let block: [f64; ALPHABET] = core::array::from_fn(|l| {
                    let owner = (l / 5).min(NUM_CLASSES - 1);
                    if owner == c {
                        1.0
                    } else {
                        0.0
                    }
                });
                [block; BUCKETS]
            })
            .collect();
        NameModel {
            min_len: [min_len; NUM_CLASSES],
            max_len: [max_len; NUM_CLASSES],
            weights,
        }
    }

    /// Log-normal letter weights `exp(signal * z)` drawn per class and
    /// bucket; `signal` controls how much a name reveals about its class.
    pub fn random(signal: f64, min_len: [usize; NUM_CLASSES], max_len: [usize; NUM_CLASSES], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..NUM_CLASSES)
            .map(|_| {
                core::array::from_fn(|_| {
                    core::array::from_fn(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        libm::exp(signal * z)
                    })
                })
            })
            .collect();
        NameModel {
            min_len,
            max_len,
            weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.weights.len() != NUM_CLASSES {
            return bad(format!("name model needs {NUM_CLASSES} classes, has {}", self.weights.len()));
        }
        for c in 0..NUM_CLASSES {
            if self.min_len[c] == 0 || self.min_len[c] > self.max_len[c] {
                return bad(format!("name length range for class {c} must satisfy 1 <= min <= max"));
            }
            for table in &self.weights[c] {
                if table.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || table.iter().sum::<f64>() <= 0.0 {
                    return bad(format!("letter weights for class {c} must be non-negative with a positive sum"));
                }
            }
        }
        Ok(())
    }

    fn letter_prob(&self, class: usize, bucket: usize, letter: usize) -> f64 {
        let table = &self.weights[class][bucket];
        table[letter] / table.iter().sum::<f64>()
    }

    /// `P(name | class)` for a normalized name; zero outside the support.
    pub fn likelihood(&self, name: &str, class: RaceClass) -> f64 {
        let c = class.code();
        let bytes = name.as_bytes();
        let len = bytes.len();
        if len < self.min_len[c] || len > self.max_len[c] {
            return 0.0;
        }
        let mut p = 1.0 / (self.max_len[c] - self.min_len[c] + 1) as f64;
        for (pos, &b) in bytes.iter().enumerate() {
            if !b.is_ascii_lowercase() {
                return 0.0;
            }
            p *= self.letter_prob(c, bucket(pos, len), usize::from(b - b'a'));
        }
        p
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: RaceClass, rng: &mut R) -> String {
        let c = class.code();
        let len = rng.gen_range(self.min_len[c]..=self.max_len[c]);
        let mut s = String::with_capacity(len);
        for pos in 0..len {
            let table = &self.weights[c][bucket(pos, len)];
            let letter = draw(&cumulative(table), rng);
            s.push((b'a' + letter as u8) as char);
        }
        s
    }
}

fn cumulative(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    weights
        .iter()
        .map(|w| {
            acc += w / total;
            acc
        })
        .collect()
}

/// Index of the first cumulative weight above a uniform draw, skipping
/// zero-weight entries.
fn draw<R: Rng + ?Sized>(cumulative: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let last = cumulative.len().saturating_sub(1);
    let mut i = cumulative.partition_point(|&c| c <= u).min(last);
    // Guard against rounding leaving u above the final cumulative value.
    while i > 0 && cumulative[i] == cumulative[i - 1] {
        i -= 1;
    }
    i
}

fn capitalize(name: &str) -> String {
    let mut out = String::with_capacity(name.len());
    let mut chars = name.chars();
    if let Some(first) = chars.next() {
        out.push(first.to_ascii_uppercase());
        out.push_str(chars.as_str());
    }
    out
}

/// Tract median income: `median * exp(white_slope * (white_share - white_prevalence) + noise_sd * N(0,1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncomeModel {
    pub median: f64,
    pub white_slope: f64,
    pub noise_sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub prevalences: RaceDistribution,
    pub num_tracts: usize,
    /// Dirichlet concentration of tract compositions around the prevalences;
    /// smaller values mean stronger segregation.
    pub concentration: f64,
    pub num_records: usize,
    pub seed: u64,
    pub mode: IndependenceMode,
    /// Log-odds tilt per standard deviation of log income, applied to the
    /// residence of non-White classes in confounded mode.
    pub ses_strength: f64,
    pub income: IncomeModel,
    pub surnames: NameModel,
    pub first_names: NameModel,
    /// Share of records with a middle name; middle names are drawn from one
    /// class-independent model.
    pub middle_name_rate: f64,
    pub prior_tables: PriorTableSource,
    /// Nominal population size used to turn exact name probabilities into
    /// table counts.
    pub prior_population: f64,
}

pub const CANONICAL_PREVALENCES: [f64; NUM_CLASSES] = [0.6, 0.15, 0.15, 0.07, 0.03];
pub const CANONICAL_SEED: u64 = 42;
const CANONICAL_NAME_SEED: u64 = 0x6e61_6d65;

impl SynthConfig {
    /// The frozen desk-scale benchmark (confounded residence).
    pub fn canonical() -> Self {
        SynthConfig {
            prevalences: RaceDistribution::new(CANONICAL_PREVALENCES).expect("valid prevalences"),
            num_tracts: 200,
            concentration: 1.5,
            num_records: 20_000,
            seed: CANONICAL_SEED,
            mode: IndependenceMode::SesConfounded,
            ses_strength: 2.0,
            income: IncomeModel {
                median: 60_000.0,
                white_slope: 1.2,
                noise_sd: 0.25,
            },
            surnames: NameModel::random(0.6, [4, 3, 4, 3, 3], [7, 6, 8, 5, 7], CANONICAL_NAME_SEED),
            first_names: NameModel::uninformative(3, 7),
            middle_name_rate: 0.3,
            prior_tables: PriorTableSource::Exact,
            prior_population: 1e15,
        }
    }

    /// The canonical benchmark with residence independent of income.
    pub fn canonical_independent() -> Self {
        SynthConfig {
            mode: IndependenceMode::Independent,
            ..Self::canonical()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.num_records == 0 {
            return bad("record count must be at least 1");
        }
        if self.num_tracts == 0 || self.num_tracts > 999_000 {
            return bad("tract count must be in 1..=999000");
        }
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return bad("concentration must be positive");
        }
        if !self.ses_strength.is_finite() {
            return bad("ses_strength must be finite");
        }
        if !(self.income.median > 0.0 && self.income.noise_sd >= 0.0 && self.income.white_slope.is_finite()) {
            return bad("income model needs a positive median and non-negative noise");
        }
        if !(0.0..=1.0).contains(&self.middle_name_rate) {
            return bad("middle_name_rate must be in [0, 1]");
        }
        if !(self.prior_population >= 1.0) {
            return bad("prior_population must be at least 1");
        }
        self.surnames.validate()?;
        self.first_names.validate()
    }
}

pub fn synth_geoid(tract: usize) -> Geoid {
    let county = tract / 1000 + 1;
    let code = (tract % 1000 + 1) * 100;
    Geoid::parse(&format!("99{county:03}{code:06}")).expect("eleven digits")
}

/// Everything derived from a config before records are drawn.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub tract_rows: Vec<TractRow>,
    pub tracts: TractTable,
    /// `residence[class][tract]`: the actual `P(tract | class)`.
    pub residence: [Vec<f64>; NUM_CLASSES],
    index: BTreeMap<Geoid, usize>,
    middle_names: NameModel,
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub records: Vec<PersonRecord>,
    pub tracts: TractTable,
    pub tract_rows: Vec<TractRow>,
    pub surnames: NamePriorTable,
    pub first_names: NamePriorTable,
    pub marginal: RaceDistribution,
}

/// Rescales columns to the target means and renormalizes rows until both
/// hold; zero-prevalence columns stay zero.
fn rake(rows: &mut [[f64; NUM_CLASSES]], target: &[f64; NUM_CLASSES]) {
    let n = rows.len() as f64;
    for _ in 0..500 {
        let mut col = [0.0; NUM_CLASSES];
        for r in rows.iter() {
            for k in 0..NUM_CLASSES {
                col[k] += r[k] / n;
            }
        }
        let mut worst: f64 = 0.0;
        for k in 0..NUM_CLASSES {
            worst = worst.max((col[k] - target[k]).abs());
        }
        if worst < 1e-13 {
            return;
        }
        for r in rows.iter_mut() {
            for k in 0..NUM_CLASSES {
                if col[k] > 0.0 {
                    r[k] *= target[k] / col[k];
                }
            }
            let s: f64 = r.iter().sum();
            if s > 0.0 {
                r.iter_mut().for_each(|v| *v /= s);
            }
        }
    }
}

impl SynthWorld {
    pub fn build(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let prev = *config.prevalences.probs();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);

        let mut comps: Vec<[f64; NUM_CLASSES]> = Vec::with_capacity(config.num_tracts);
        let gammas: Vec<Option<Gamma<f64>>> = prev
            .iter()
            .map(|&p| (p > 0.0).then(|| Gamma::new(config.concentration * p, 1.0).expect("positive shape")))
            .collect();
        for _ in 0..config.num_tracts {
            let mut w = [0.0; NUM_CLASSES];
            for (k, g) in gammas.iter().enumerate() {
                if let Some(g) = g {
                    // keep a tiny floor so every class can live everywhere
                    w[k] = g.sample(&mut rng).max(1e-6 * prev[k]);
                }
            }
            let s: f64 = w.iter().sum();
            comps.push(w.map(|v| v / s));
        }
        rake(&mut comps, &prev);

        let white = RaceClass::White.code();
        let incomes: Vec<f64> = comps
            .iter()
            .map(|c| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let log = libm::log(config.income.median)
                    + config.income.white_slope * (c[white] - prev[white])
                    + config.income.noise_sd * z;
                libm::round(libm::exp(log))
            })
            .collect();

        let t = config.num_tracts as f64;
        let mut residence: [Vec<f64>; NUM_CLASSES] = Default::default();
        for k in 0..NUM_CLASSES {
            residence[k] = comps
                .iter()
                .map(|c| if prev[k] > 0.0 { c[k] / (t * prev[k]) } else { 1.0 / t })
                .collect();
        }
        if config.mode == IndependenceMode::SesConfounded && config.num_tracts > 1 {
            let logs: Vec<f64> = incomes.iter().map(|&i| libm::log(i.max(1.0))).collect();
            let mean = logs.iter().sum::<f64>() / t;
            let sd = libm::sqrt(logs.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / t);
            let sd = if sd > 0.0 { sd } else { 1.0 };
            for (k, res) in residence.iter_mut().enumerate() {
                if k == white {
                    continue;
                }
                for (r, l) in res.iter_mut().zip(&logs) {
                    *r *= libm::exp(config.ses_strength * (l - mean) / sd);
                }
                let s: f64 = res.iter().sum();
                res.iter_mut().for_each(|r| *r /= s);
            }
        }

        let tract_rows: Vec<TractRow> = comps
            .iter()
            .zip(&incomes)
            .enumerate()
            .map(|(i, (c, &median_income))| {
                Ok(TractRow {
                    geoid: synth_geoid(i),
                    composition: RaceDistribution::from_weights(*c)?,
                    median_income,
                })
            })
            .collect::<Result<_>>()?;
        let tracts = TractTable::from_rows(tract_rows.clone())?;
        let index = tract_rows.iter().enumerate().map(|(i, r)| (r.geoid.clone(), i)).collect();

        Ok(SynthWorld {
            config: config.clone(),
            tract_rows,
            tracts,
            residence,
            index,
            middle_names: NameModel::uninformative(3, 7),
        })
    }

    pub fn tract_index(&self, geoid: &Geoid) -> Option<usize> {
        self.index.get(geoid).copied()
    }

    /// Exact `P(race | surname, first name, tract)` under the generator.
    pub fn bayes_optimal_posterior(&self, surname: &str, first: &str, geoid: &Geoid) -> Result<RaceDistribution> {
        let tract = self
            .tract_index(geoid)
            .ok_or_else(|| Error::OutOfSupport(format!("tract {geoid}")))?;
        let (s, f) = (normalize_name(surname), normalize_name(first));
        let prev = self.config.prevalences.probs();
        let w: [f64; NUM_CLASSES] = core::array::from_fn(|k| {
            let class = RaceClass::ALL[k];
            prev[k]
                * self.residence[k][tract]
                * self.config.surnames.likelihood(&s, class)
                * self.config.first_names.likelihood(&f, class)
        });
        RaceDistribution::from_weights(w)
            .map_err(|_| Error::OutOfSupport(format!("{first} {surname} in tract {geoid}")))
    }

    /// Mean over the records of the largest Bayes-optimal posterior.
    pub fn bayes_optimal_accuracy(&self, records: &[PersonRecord]) -> Result<f64> {
        if records.is_empty() {
            return Err(Error::Empty);
        }
        let mut total = 0.0;
        for r in records {
            let geoid = r
                .tract_geoid
                .as_ref()
                .ok_or_else(|| Error::OutOfSupport(format!("record {} has no tract", r.row_id)))?;
            total += self.bayes_optimal_posterior(&r.last, &r.first, geoid)?.max_prob();
        }
        Ok(total / records.len() as f64)
    }

    /// Exact `P(race | name)` for one name model.
    pub fn name_posterior(&self, kind: NameKind, name: &str) -> Option<RaceDistribution> {
        let model = match kind {
            NameKind::Surname => &self.config.surnames,
            NameKind::Firstname => &self.config.first_names,
        };
        let n = normalize_name(name);
        let prev = self.config.prevalences.probs();
        let w: [f64; NUM_CLASSES] = core::array::from_fn(|k| prev[k] * model.likelihood(&n, RaceClass::ALL[k]));
        RaceDistribution::from_weights(w).ok()
    }

    fn name_probability(&self, kind: NameKind, name: &str) -> f64 {
        let model = match kind {
            NameKind::Surname => &self.config.surnames,
            NameKind::Firstname => &self.config.first_names,
        };
        let prev = self.config.prevalences.probs();
        RaceClass::ALL
            .iter()
            .map(|&c| prev[c.code()] * model.likelihood(name, c))
            .sum()
    }

    /// Draws record `index` from its own generator stream, so records do
    /// not depend on each other.
    pub fn sample_record(&self, index: usize) -> PersonRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(index as u64 + 1);
        let class = RaceClass::ALL[draw(&cumulative(self.config.prevalences.probs()), &mut rng)];
        let tract = draw(&cumulative(&self.residence[class.code()]), &mut rng);
        let last = self.config.surnames.sample(class, &mut rng);
        let first = self.config.first_names.sample(class, &mut rng);
        let middle = (rng.gen::<f64>() < self.config.middle_name_rate)
            .then(|| capitalize(&self.middle_names.sample(class, &mut rng)));
        PersonRecord {
            row_id: format!("p{:06}", index + 1),
            first: capitalize(&first),
            middle,
            last: capitalize(&last),
            tract_geoid: Some(self.tract_rows[tract].geoid.clone()),
            label: Some(class),
        }
    }

    fn prior_table(&self, kind: NameKind, records: &[PersonRecord]) -> Result<NamePriorTable> {
        let prev = self.config.prevalences;
        let marginal = if prev.is_strictly_positive() {
            prev
        } else {
            // Tables need a positive Bayes denominator; degenerate
            // prevalences get a negligible floor.
            RaceDistribution::from_weights(prev.probs().map(|p| p + 1e-9))?
        };
        let mut table = NamePriorTable::new(kind, marginal)?;
        let names = records.iter().map(|r| match kind {
            NameKind::Surname => normalize_name(&r.last),
            NameKind::Firstname => normalize_name(&r.first),
        });
        match self.config.prior_tables {
            PriorTableSource::Exact => {
                let distinct: alloc::collections::BTreeSet<String> = names.collect();
                for name in distinct {
                    let dist = self
                        .name_posterior(kind, &name)
                        .ok_or_else(|| Error::OutOfSupport(format!("generated name {name}")))?;
                    let p = self.name_probability(kind, &name);
                    let count = libm::round(p * self.config.prior_population).max(1.0) as u64;
                    table.insert(&name, dist, count);
                }
            }
            PriorTableSource::Estimated => {
                let mut counts: BTreeMap<String, [u64; NUM_CLASSES]> = BTreeMap::new();
                for (name, r) in names.zip(records) {
                    let label = r.label.expect("generated records are labeled");
                    counts.entry(name).or_default()[label.code()] += 1;
                }
                for (name, c) in counts {
                    let n: u64 = c.iter().sum();
                    let dist = RaceDistribution::from_weights(c.map(|v| v as f64))?;
                    table.insert(&name, dist, n);
                }
            }
        }
        Ok(table)
    }

    pub fn generate(&self) -> Result<SynthDataset> {
        let records: Vec<PersonRecord> = (0..self.config.num_records).map(|i| self.sample_record(i)).collect();
        Ok(SynthDataset {
            surnames: self.prior_table(NameKind::Surname, &records)?,
            first_names: self.prior_table(NameKind::Firstname, &records)?,
            records,
            tracts: self.tracts.clone(),
            tract_rows: self.tract_rows.clone(),
            marginal: self.config.prevalences,
        })
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    SynthWorld::build(config)?.generate()
}
