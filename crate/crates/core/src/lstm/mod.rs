//! Character-level bidirectional LSTM over names with optional fusion of
//! tract geography (race shares and income decile).
//!
//! Parameters live in one flat `Vec<f64>` described by a [`ParamLayout`], so
//! the optimizer and the finite-difference checker can treat them uniformly.

mod adam;
mod gradcheck;
mod model;
mod network;
mod predict;
mod train;
mod vocab;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckOptions, GradCheckReport, TensorCheck};
pub use model::{CellLayout, LstmGeoModel, ParamLayout, TensorSpec, TrainingMeta};
pub use network::{ForwardCache, Gradients, Mode};
pub use predict::{geo_vector_for, mean_geo_vector, predict_batch, Prediction};
pub use train::{
    loss_and_gradients, mean_loss, train, train_examples, Clock, EarlyStopping, EpochRecord, Example, NoClock,
    StopDecision, TrainingLog,
};
pub use vocab::{geo_prefix_tokens, tokenize, TokenSequence, Vocabulary, BASE_VOCAB_SIZE, GEO_BINS, PAD, SEP, UNK};

use serde::{Deserialize, Serialize};

use crate::data::TractRecord;
use crate::error::{Error, Result};
use crate::race::RaceDistribution;

pub const GEO_FEATURES: usize = 6;

/// Five tract race shares followed by the income decile scaled to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoVector(pub [f64; GEO_FEATURES]);

impl GeoVector {
    pub fn new(composition: &RaceDistribution, scaled_decile: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&scaled_decile) {
            return Err(Error::Invariant(alloc::format!(
                "scaled income decile {scaled_decile} outside [0, 1]"
            )));
        }
        let mut v = [0.0; GEO_FEATURES];
        v[..5].copy_from_slice(composition.probs());
        v[5] = scaled_decile;
        Ok(GeoVector(v))
    }

    pub fn from_tract(tract: &TractRecord) -> Self {
        GeoVector::new(&tract.composition, tract.scaled_decile())
            .expect("tract deciles are within 1..=10")
    }

    pub fn composition(&self) -> [f64; 5] {
        let mut c = [0.0; 5];
        c.copy_from_slice(&self.0[..5]);
        c
    }
}

/// How tract features reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeoMode {
    /// Name-only model; any geo argument is ignored.
    Disabled,
    /// Geo features concatenated with the recurrent readout before the dense head.
    Head,
    /// Each geo feature quantized into one of [`GEO_BINS`] bins and prepended
    /// to the character sequence as a dedicated token.
    PrefixTokens,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmGeoConfig {
    pub embed_dim: usize,
    /// Units per direction.
    pub hidden_units: usize,
    pub num_layers: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
    pub geo_mode: GeoMode,
    pub use_middle_name: bool,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub early_stop_min_delta: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

impl LstmGeoConfig {
    /// Full-size architecture and optimizer settings.
    pub fn full() -> Self {
        LstmGeoConfig {
            embed_dim: 256,
            hidden_units: 512,
            num_layers: 4,
            dropout_rate: 0.15,
            max_len: 60,
            geo_mode: GeoMode::Head,
            use_middle_name: true,
            learning_rate: 3.16e-5,
            batch_size: 512,
            early_stop_patience: 1,
            early_stop_min_delta: 0.001,
            max_epochs: 100,
            seed: 0,
        }
    }

    /// Laptop-scale defaults.
    pub fn desk() -> Self {
        LstmGeoConfig {
            embed_dim: 32,
            hidden_units: 64,
            num_layers: 2,
            learning_rate: 3e-3,
            batch_size: 64,
            max_epochs: 30,
            ..Self::full()
        }
    }

    /// Tiny dimensions for finite-difference checks.
    pub fn micro() -> Self {
        LstmGeoConfig {
            embed_dim: 3,
            hidden_units: 3,
            num_layers: 2,
            batch_size: 1,
            max_epochs: 1,
            ..Self::desk()
        }
    }

    pub fn geo_enabled(&self) -> bool {
        self.geo_mode != GeoMode::Disabled
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.embed_dim == 0 || self.hidden_units == 0 || self.num_layers == 0 || self.max_len == 0 {
            return bad("all dimensions must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.early_stop_min_delta >= 0.0) {
            return bad("early_stop_min_delta must be non-negative");
        }
        Ok(())
    }
}
