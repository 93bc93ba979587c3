use alloc::vec;
use alloc::vec::Vec;

use super::model::LstmGeoModel;
use super::network::Mode;
use super::vocab::{tokenize, TokenSequence, UNK};
use super::{GeoVector, LstmGeoConfig};
use crate::data::{PersonRecord, TractTable};
use crate::race::RaceDistribution;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub dist: RaceDistribution,
    /// The record's tract was missing or unknown; the table mean was used.
    pub imputed_geo: bool,
    /// The surname normalized to nothing and was scored as a single UNK.
    pub unknown_name: bool,
}

/// Table-wide mean geo vector used for records without a known tract.
pub fn mean_geo_vector(tracts: &TractTable) -> GeoVector {
    let (comp, decile) = tracts.mean_features();
    GeoVector::new(&comp, decile).expect("mean of scaled deciles lies in [0, 1]")
}

/// The record's tract features, or the table mean with `true` when the
/// geoid is missing or not in the table.
pub fn geo_vector_for(record: &PersonRecord, tracts: &TractTable) -> (GeoVector, bool) {
    match record.tract_geoid.as_ref().and_then(|g| tracts.get(g)) {
        Some(t) => (GeoVector::from_tract(t), false),
        None => (mean_geo_vector(tracts), true),
    }
}

pub(crate) struct Encoded {
    pub tokens: TokenSequence,
    pub geo: Option<GeoVector>,
    pub imputed_geo: bool,
    pub unknown_name: bool,
}

pub(crate) fn encode(record: &PersonRecord, config: &LstmGeoConfig, tracts: &TractTable, mean: &GeoVector) -> Encoded {
    let (tokens, unknown_name) = match tokenize(&record.first, record.middle.as_deref(), &record.last, config) {
        Ok(t) => (t, false),
        Err(_) => (TokenSequence(vec![UNK]), true),
    };
    let (geo, imputed_geo) = if config.geo_enabled() {
        match record.tract_geoid.as_ref().and_then(|g| tracts.get(g)) {
            Some(t) => (Some(GeoVector::from_tract(t)), false),
            None => (Some(*mean), true),
        }
    } else {
        (None, false)
    };
    Encoded {
        tokens,
        geo,
        imputed_geo,
        unknown_name,
    }
}

/// Scores records in inference mode; output order follows input order.
pub fn predict_batch(model: &LstmGeoModel, records: &[PersonRecord], tracts: &TractTable) -> Vec<Prediction> {
    if records.is_empty() {
        return Vec::new();
    }
    let mean = mean_geo_vector(tracts);
    records
        .iter()
        .map(|r| {
            let e = encode(r, &model.config, tracts, &mean);
            let out = model
                .forward(&e.tokens, e.geo.as_ref(), Mode::Infer)
                .expect("encoded records always fit the model");
            Prediction {
                dist: out.probs,
                imputed_geo: e.imputed_geo,
                unknown_name: e.unknown_name,
            }
        })
        .collect()
}
