//! The five-model comparison on a synthetic population: BISG, BIFSG,
//! name-only LSTM, LSTM+Geo and the boosted post-filter, scored on the
//! stratified holdout.

use std::time::Instant;

use raceimpute_core::data::PersonRecord;
use raceimpute_core::gbdt::GbdtConfig;
use raceimpute_core::lstm::{predict_batch, train_examples, Clock, EpochRecord, Example, GeoMode, LstmGeoConfig, LstmGeoModel, TrainingLog};
use raceimpute_core::pipeline::{filter_features, score_bayes, train_filter, BayesMethod, Scored};
use raceimpute_core::split::{stratified_split, SplitRatios};
use raceimpute_core::synth::{SynthDataset, SynthWorld};
use raceimpute_core::{RaceClass, RaceDistribution};
use serde::Serialize;

use crate::error::{AppError, AppResult};
use crate::report::{evaluate_model, DatasetFingerprint, Note, Report};

pub const ROSTER: [&str; 5] = ["bisg", "bifsg", "lstm", "lstm-geo", "lstm-geo-xgb"];
pub const ORACLE: &str = "bayes-optimal";

/// Wall clock for training logs.
pub struct InstantClock(Instant);

impl InstantClock {
    pub fn start() -> Self {
        InstantClock(Instant::now())
    }
}

impl Clock for InstantClock {
    fn elapsed_seconds(&self) -> f64 {
        self.0.elapsed().as_secs_f64()
    }
}

/// Network size used for the benchmark comparison: one 32-unit
/// bidirectional layer over 16-wide embeddings, patience 3.
pub fn benchmark_lstm_config() -> LstmGeoConfig {
    LstmGeoConfig {
        embed_dim: 16,
        hidden_units: 32,
        num_layers: 1,
        dropout_rate: 0.15,
        learning_rate: 3e-3,
        batch_size: 32,
        early_stop_patience: 3,
        early_stop_min_delta: 0.001,
        max_epochs: 15,
        ..LstmGeoConfig::desk()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkOptions {
    pub lstm: LstmGeoConfig,
    pub filter: GbdtConfig,
    /// Drives the split and both network initializations.
    pub seed: u64,
}

impl BenchmarkOptions {
    pub fn new(seed: u64) -> Self {
        BenchmarkOptions {
            lstm: benchmark_lstm_config(),
            filter: GbdtConfig::default(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutcome {
    pub seed: u64,
    pub holdout: Vec<PersonRecord>,
    /// Mean Bayes-optimal max posterior over the holdout.
    pub ceiling: f64,
    /// Roster order, then the Bayes-optimal oracle.
    pub predictions: Vec<(String, Vec<Scored>)>,
    pub logs: Vec<(String, TrainingLog)>,
    pub filter_choice: GbdtConfig,
    /// The LSTM+Geo network behind the `lstm-geo` and filtered predictions.
    pub geo_model: LstmGeoModel,
}

impl BenchmarkOutcome {
    pub fn classes(&self, model: &str) -> Option<Vec<RaceClass>> {
        self.predictions
            .iter()
            .find(|(n, _)| n == model)
            .map(|(_, s)| s.iter().map(|x| x.dist.classify()).collect())
    }
}

fn core_err(what: &str) -> impl Fn(raceimpute_core::Error) -> AppError + '_ {
    move |e| AppError::core(what.to_string(), e)
}

fn from_lstm(preds: Vec<raceimpute_core::lstm::Prediction>) -> Vec<Scored> {
    preds
        .into_iter()
        .map(|p| Scored {
            dist: p.dist,
            imputed_geo: p.imputed_geo,
            degenerate: false,
        })
        .collect()
}

fn train_network(
    config: &LstmGeoConfig,
    name: &str,
    train: &[PersonRecord],
    validation: &[PersonRecord],
    data: &SynthDataset,
    progress: &mut dyn FnMut(&str),
) -> AppResult<(LstmGeoModel, TrainingLog)> {
    let encode = |rs: &[PersonRecord]| {
        rs.iter()
            .map(|r| Example::from_record(r, config, &data.tracts))
            .collect::<raceimpute_core::Result<Vec<_>>>()
            .map_err(core_err(name))
    };
    let (tr, va) = (encode(train)?, encode(validation)?);
    let clock = InstantClock::start();
    let mut report = |e: &EpochRecord| {
        progress(&format!(
            "{name}: epoch {} train {:.4} validation {:.4} ({:.1}s)",
            e.epoch, e.train_loss, e.validation_loss, e.wall_seconds
        ))
    };
    train_examples(config, &tr, &va, &clock, &mut report).map_err(core_err(name))
}

/// Splits the dataset, fits every model on train/validation and scores the holdout.
pub fn run_benchmark(
    world: &SynthWorld,
    data: &SynthDataset,
    options: &BenchmarkOptions,
    progress: &mut dyn FnMut(&str),
) -> AppResult<BenchmarkOutcome> {
    let (split, _) = stratified_split(&data.records, SplitRatios::default(), options.seed).map_err(core_err("split"))?;
    let holdout = split.holdout.clone();
    let mut predictions = Vec::new();

    for (name, method) in [("bisg", BayesMethod::Bisg), ("bifsg", BayesMethod::Bifsg)] {
        let scored = score_bayes(method, &holdout, &data.surnames, Some(&data.first_names), &data.tracts).map_err(core_err(name))?;
        predictions.push((name.to_string(), scored));
    }

    let mut logs = Vec::new();
    let mut geo_model = None;
    for (name, mode) in [("lstm", GeoMode::Disabled), ("lstm-geo", GeoMode::Head)] {
        let config = LstmGeoConfig {
            geo_mode: mode,
            seed: options.seed,
            ..options.lstm.clone()
        };
        let (model, log) = train_network(&config, name, &split.train, &split.validation, data, progress)?;
        predictions.push((name.to_string(), from_lstm(predict_batch(&model, &holdout, &data.tracts))));
        logs.push((name.to_string(), log));
        geo_model = Some(model);
    }
    let geo_model = geo_model.expect("lstm-geo trained");

    progress("lstm-geo-xgb: grid search on validation outputs");
    let val_probs: Vec<RaceDistribution> = predict_batch(&geo_model, &split.validation, &data.tracts).iter().map(|p| p.dist).collect();
    let val_x = filter_features(&split.validation, &val_probs, &data.tracts).map_err(core_err("filter features"))?;
    let val_y: Vec<RaceClass> = split.validation.iter().map(|r| r.label.expect("synthetic records are labeled")).collect();
    let filter = train_filter(&val_x, &val_y, &options.filter).map_err(core_err("lstm-geo-xgb"))?;

    let geo_scored = &predictions.iter().find(|(n, _)| n == "lstm-geo").expect("lstm-geo scored").1;
    let hold_probs: Vec<RaceDistribution> = geo_scored.iter().map(|s| s.dist).collect();
    let hold_x = filter_features(&holdout, &hold_probs, &data.tracts).map_err(core_err("filter features"))?;
    let filtered = hold_x
        .iter()
        .zip(geo_scored)
        .map(|(x, s)| Scored {
            dist: filter.model.predict(x),
            imputed_geo: s.imputed_geo,
            degenerate: false,
        })
        .collect();
    predictions.push(("lstm-geo-xgb".to_string(), filtered));

    let oracle = holdout
        .iter()
        .map(|r| {
            let geoid = r.tract_geoid.as_ref().expect("synthetic records have tracts");
            world
                .bayes_optimal_posterior(&r.last, &r.first, geoid)
                .map(|dist| Scored {
                    dist,
                    imputed_geo: false,
                    degenerate: false,
                })
        })
        .collect::<raceimpute_core::Result<Vec<_>>>()
        .map_err(core_err(ORACLE))?;
    predictions.push((ORACLE.to_string(), oracle));
    let ceiling = world.bayes_optimal_accuracy(&holdout).map_err(core_err(ORACLE))?;

    Ok(BenchmarkOutcome {
        seed: options.seed,
        holdout,
        ceiling,
        predictions,
        logs,
        filter_choice: filter.chosen,
        geo_model,
    })
}

/// Report over the holdout with income bins at the tract decile edges.
pub fn benchmark_report(outcome: &BenchmarkOutcome, data: &SynthDataset) -> AppResult<Report> {
    let edges = data.tracts.decile_income_edges();
    let mut report = Report::new(DatasetFingerprint::of(&outcome.holdout, None), edges.clone());
    for (name, scored) in &outcome.predictions {
        let preds: Vec<RaceClass> = scored.iter().map(|s| s.dist.classify()).collect();
        report.models.push(evaluate_model(name, None, &preds, &outcome.holdout, &data.tracts, &edges)?);
    }
    report.notes.push(Note {
        name: "bayes_optimal_expected_accuracy".into(),
        value: outcome.ceiling,
    });
    report.notes.push(Note {
        name: "seed".into(),
        value: outcome.seed as f64,
    });
    Ok(report)
}
