//! Record-level scoring shared by the CLI and the benchmark: Bayes methods
//! over prior tables, and the boosted post-filter on top of LSTM+Geo.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::bayes::{bifsg_posterior, bisg_posterior, BayesInputs};
use crate::data::{NamePriorTable, PersonRecord, TractTable};
use crate::error::{Error, Result};
use crate::gbdt::{default_grid, filter_features_from_parts, fit, grid_search, FilterFeatures, GbdtConfig, GbdtModel, GridResult};
use crate::race::{RaceClass, RaceDistribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BayesMethod {
    Bisg,
    Bifsg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub dist: RaceDistribution,
    /// No usable tract: the marginal stood in for the tract composition
    /// (Bayes) or the table mean for the geo vector (neural models).
    pub imputed_geo: bool,
    pub degenerate: bool,
}

/// Scores records with BISG or BIFSG. Records without a known tract use the
/// marginal as their tract composition, so the geography factor cancels.
pub fn score_bayes(
    method: BayesMethod,
    records: &[PersonRecord],
    surnames: &NamePriorTable,
    first_names: Option<&NamePriorTable>,
    tracts: &TractTable,
) -> Result<Vec<Scored>> {
    let marginal = *surnames.marginal();
    if method == BayesMethod::Bifsg && first_names.is_none() {
        return Err(Error::MissingFirstNamePrior);
    }
    records
        .iter()
        .map(|r| {
            let tract = r.tract_geoid.as_ref().and_then(|g| tracts.get(g));
            let inputs = BayesInputs {
                surname_prior: surnames.lookup(&r.last),
                firstname_prior: first_names.map(|t| t.lookup(&r.first)),
                tract_composition: tract.map_or(marginal, |t| t.composition),
                marginal,
            };
            let post = match method {
                BayesMethod::Bisg => bisg_posterior(&inputs)?,
                BayesMethod::Bifsg => bifsg_posterior(&inputs)?,
            };
            Ok(Scored {
                dist: post.dist,
                imputed_geo: tract.is_none(),
                degenerate: post.degenerate,
            })
        })
        .collect()
}

/// Filter inputs for each record; records without a known tract get the
/// table-mean composition and decile.
pub fn filter_features(records: &[PersonRecord], probs: &[RaceDistribution], tracts: &TractTable) -> Result<Vec<FilterFeatures>> {
    if records.len() != probs.len() {
        return Err(Error::LengthMismatch {
            preds: probs.len(),
            labels: records.len(),
        });
    }
    let (mean_comp, mean_decile) = tracts.mean_features();
    Ok(records
        .iter()
        .zip(probs)
        .map(|(r, p)| match r.tract_geoid.as_ref().and_then(|g| tracts.get(g)) {
            Some(t) => filter_features_from_parts(p, &t.composition, t.scaled_decile()),
            None => filter_features_from_parts(p, &mean_comp, mean_decile),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterTraining {
    pub model: GbdtModel,
    pub chosen: GbdtConfig,
    pub grid: Vec<GridResult>,
}

/// Grid-searches the filter with even rows as the fit half and odd rows as
/// the selection half, then refits the winner on every row.
pub fn train_filter(features: &[FilterFeatures], labels: &[RaceClass], base: &GbdtConfig) -> Result<FilterTraining> {
    if features.len() != labels.len() {
        return Err(Error::LengthMismatch {
            preds: features.len(),
            labels: labels.len(),
        });
    }
    if features.len() < 4 {
        return Err(Error::Empty);
    }
    let half = |parity: usize| -> (Vec<FilterFeatures>, Vec<RaceClass>) {
        features
            .iter()
            .zip(labels)
            .enumerate()
            .filter(|(i, _)| i % 2 == parity)
            .map(|(_, (f, l))| (*f, *l))
            .unzip()
    };
    let (fit_x, fit_y) = half(0);
    let (sel_x, sel_y) = half(1);
    let (chosen, grid) = grid_search(&default_grid(base), (&fit_x, &fit_y), (&sel_x, &sel_y))?;
    let model = fit(features, labels, &chosen)?;
    Ok(FilterTraining { model, chosen, grid })
}
