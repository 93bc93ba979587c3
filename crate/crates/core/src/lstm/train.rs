//! Minibatch Adam training with validation-loss early stopping.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::model::LstmGeoModel;
use super::network::{cross_entropy, Gradients, Mode};
use super::predict::{encode, mean_geo_vector};
use super::vocab::TokenSequence;
use super::{GeoVector, LstmGeoConfig};
use crate::data::{PersonRecord, TractTable};
use crate::error::{Error, Result};
use crate::race::{RaceClass, NUM_CLASSES};
use crate::split::DatasetSplit;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub tokens: TokenSequence,
    pub geo: Option<GeoVector>,
    pub label: RaceClass,
}

impl Example {
    /// Encodes a labeled record the same way inference does.
    pub fn from_record(record: &PersonRecord, config: &LstmGeoConfig, tracts: &TractTable) -> Result<Self> {
        let label = record.label.ok_or_else(|| Error::MissingLabel(record.row_id.clone()))?;
        let e = encode(record, config, tracts, &mean_geo_vector(tracts));
        Ok(Example {
            tokens: e.tokens,
            geo: e.geo,
            label,
        })
    }
}

fn encode_all(records: &[PersonRecord], config: &LstmGeoConfig, tracts: &TractTable) -> Result<Vec<Example>> {
    let mean = mean_geo_vector(tracts);
    records
        .iter()
        .map(|r| {
            let label = r.label.ok_or_else(|| Error::MissingLabel(r.row_id.clone()))?;
            let e = encode(r, config, tracts, &mean);
            Ok(Example {
                tokens: e.tokens,
                geo: e.geo,
                label,
            })
        })
        .collect()
}

/// Per-example dropout seed derived from the batch seed (splitmix64 step).
fn example_seed(batch_seed: u64, index: usize) -> u64 {
    let mut z = batch_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mean cross-entropy over the batch and its exact gradient. Examples are
/// reduced in order, so the result is reproducible for a fixed seed.
pub fn loss_and_gradients(model: &LstmGeoModel, batch: &[Example], dropout_seed: u64) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::Empty);
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = Gradients::zeros(model.params.len());
    let mut loss = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        let mode = Mode::Train {
            dropout_seed: example_seed(dropout_seed, i),
        };
        let cache = model.forward(&ex.tokens, ex.geo.as_ref(), mode)?;
        let l = cross_entropy(&cache.logits, ex.label);
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { epoch: 0, batch: 0 });
        }
        loss += l;
        let mut d_logits = [0.0; NUM_CLASSES];
        for (k, d) in d_logits.iter_mut().enumerate() {
            let target = if k == ex.label.code() { 1.0 } else { 0.0 };
            *d = (cache.probs.probs()[k] - target) * scale;
        }
        model.backward(&cache, &d_logits, &mut grads);
    }
    Ok((loss * scale, grads))
}

/// Mean inference-mode cross-entropy.
pub fn mean_loss(model: &LstmGeoModel, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Empty);
    }
    let mut total = 0.0;
    for ex in examples {
        let cache = model.forward(&ex.tokens, ex.geo.as_ref(), Mode::Infer)?;
        total += cross_entropy(&cache.logits, ex.label);
    }
    Ok(total / examples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

/// Stops once the monitored loss has failed to drop by at least
/// `min_delta` below the best value for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: Option<f64>,
    best_epoch: Option<usize>,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: None,
            best_epoch: None,
            wait: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        let improved = match self.best {
            None => true,
            Some(best) => best - loss >= self.min_delta,
        };
        if improved {
            self.best = Some(loss);
            self.best_epoch = Some(epoch);
            self.wait = 0;
            return StopDecision::Improved;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}

/// Elapsed-time source for the training log; the core crate has no clock.
pub trait Clock {
    fn elapsed_seconds(&self) -> f64;
}

pub struct NoClock;

impl Clock for NoClock {
    fn elapsed_seconds(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

/// Trains from a fresh initialization. When `validation` is empty the
/// training loss drives early stopping instead.
pub fn train_examples(
    config: &LstmGeoConfig,
    train: &[Example],
    validation: &[Example],
    clock: &dyn Clock,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<(LstmGeoModel, TrainingLog)> {
    let mut model = LstmGeoModel::init(config)?;
    let mut log = TrainingLog::default();
    if config.max_epochs == 0 {
        return Ok((model, log));
    }
    if train.is_empty() {
        return Err(Error::Empty);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let mut adam = AdamState::new(model.params.len());
    let mut stopper = EarlyStopping::new(config.early_stop_patience.max(1), config.early_stop_min_delta);
    let mut best_params = model.params.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch: Vec<Example> = Vec::with_capacity(config.batch_size);

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i].clone()));
            let seed = rng.next_u64();
            let (loss, grads) = loss_and_gradients(&model, &batch, seed).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { epoch, batch: b },
                other => other,
            })?;
            if grads.0.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += loss * chunk.len() as f64;
            adam_step(&mut model, &mut adam, &grads, config.learning_rate);
        }
        let train_loss = loss_sum / train.len() as f64;
        let validation_loss = if validation.is_empty() {
            train_loss
        } else {
            mean_loss(&model, validation)?
        };
        if !validation_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: order.len().div_ceil(config.batch_size),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            validation_loss,
            wall_seconds: clock.elapsed_seconds(),
        };
        on_epoch(&record);
        log.epochs.push(record);

        match stopper.observe(epoch, validation_loss) {
            StopDecision::Improved => best_params.clone_from(&model.params),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                log.stopped_early = true;
                break;
            }
        }
    }

    model.params = best_params;
    log.best_epoch = stopper.best_epoch();
    model.meta.epochs_run = log.epochs.len();
    model.meta.best_epoch = stopper.best_epoch();
    model.meta.final_validation_loss = stopper.best();
    Ok((model, log))
}

/// Trains on `split.train`, early-stopping on `split.validation`.
pub fn train(config: &LstmGeoConfig, split: &DatasetSplit, tracts: &TractTable) -> Result<(LstmGeoModel, TrainingLog)> {
    let train_set = encode_all(&split.train, config, tracts)?;
    let validation = encode_all(&split.validation, config, tracts)?;
    train_examples(config, &train_set, &validation, &NoClock, &mut |_| {})
}
