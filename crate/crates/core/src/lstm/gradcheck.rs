//! Central finite-difference verification of the analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::LstmGeoModel;
use super::train::{loss_and_gradients, Example};
use super::vocab::TokenSequence;
use super::{GeoVector, LstmGeoConfig};
use crate::error::{Error, Result};
use crate::race::{RaceClass, RaceDistribution};

/// Magnitudes below this are treated as zero in the relative error.
const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub epsilon: f64,
    pub seq_len: usize,
    /// Test fixture: negate the analytic gradient of this tensor before
    /// comparing, to prove the checker notices.
    pub corrupt_tensor: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            seed: 0,
            epsilon: 1e-4,
            seq_len: 5,
            corrupt_tensor: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub parameters: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_path: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / scale
}

fn random_example(config: &LstmGeoConfig, rng: &mut ChaCha8Rng, seq_len: usize) -> Example {
    // letters, apostrophe, hyphen, space and SEP
    let tokens = (0..seq_len.max(1)).map(|_| rng.gen_range(2..32u32)).collect();
    let geo = config.geo_enabled().then(|| {
        let w: [f64; 5] = core::array::from_fn(|_| rng.gen_range(0.05..1.0));
        let comp = RaceDistribution::from_weights(w).expect("positive weights");
        GeoVector::new(&comp, f64::from(rng.gen_range(0..10u8)) / 9.0).expect("scaled decile in range")
    });
    Example {
        tokens: TokenSequence(tokens),
        geo,
        label: RaceClass::from_code(rng.gen_range(0..5)).expect("code < 5"),
    }
}

/// Compares every parameter's analytic gradient with a central difference
/// on one random example.
pub fn grad_check(config: &LstmGeoConfig, seed: u64, epsilon: f64) -> Result<GradCheckReport> {
    grad_check_with(
        config,
        &GradCheckOptions {
            seed,
            epsilon,
            ..GradCheckOptions::default()
        },
    )
}

pub fn grad_check_with(config: &LstmGeoConfig, options: &GradCheckOptions) -> Result<GradCheckReport> {
    if !(options.epsilon > 0.0 && options.epsilon.is_finite()) {
        return Err(Error::InvalidEpsilon);
    }
    let mut config = config.clone();
    config.seed = options.seed;
    let mut model = LstmGeoModel::init(&config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(1));
    let batch = [random_example(&config, &mut rng, options.seq_len)];
    let dropout_seed = rng.gen();

    let (_, grads) = loss_and_gradients(&model, &batch, dropout_seed)?;
    let mut analytic = grads.0;
    let tensors = model.layout.tensors();
    if let Some(name) = &options.corrupt_tensor {
        let t = tensors
            .iter()
            .find(|t| &t.name == name)
            .ok_or_else(|| Error::InvalidConfig(alloc::format!("no tensor named {name}")))?;
        for g in &mut analytic[t.offset..t.offset + t.len()] {
            *g = -*g;
        }
    }

    let eps = options.epsilon;
    let mut errors = Vec::with_capacity(analytic.len());
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..model.params.len() {
        let original = model.params[i];
        model.params[i] = original + eps;
        let (plus, _) = loss_and_gradients(&model, &batch, dropout_seed)?;
        model.params[i] = original - eps;
        let (minus, _) = loss_and_gradients(&model, &batch, dropout_seed)?;
        model.params[i] = original;
        let n = (plus - minus) / (2.0 * eps);
        numeric.push(n);
        errors.push(relative_error(analytic[i], n));
    }

    let worst_index = (0..errors.len())
        .max_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(b.cmp(&a)))
        .unwrap_or(0);
    let tensors = tensors
        .iter()
        .map(|t| TensorCheck {
            name: t.name.clone(),
            len: t.len(),
            max_rel_error: errors[t.offset..t.offset + t.len()].iter().copied().fold(0.0, f64::max),
        })
        .collect();
    Ok(GradCheckReport {
        epsilon: eps,
        parameters: errors.len(),
        max_rel_error: errors.get(worst_index).copied().unwrap_or(0.0),
        worst_index,
        worst_path: model.layout.path_of(worst_index),
        worst_analytic: analytic.get(worst_index).copied().unwrap_or(0.0),
        worst_numeric: numeric.get(worst_index).copied().unwrap_or(0.0),
        tensors,
    })
}
