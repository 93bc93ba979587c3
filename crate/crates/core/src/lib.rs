//! Race and ethnicity imputation from names and census-tract geography.
//!
//! Bayesian surname geocoding (BISG / BIFSG), a character-level BiLSTM with
//! tract features, a boosted-tree post-filter, evaluation metrics and a
//! synthetic population generator with exact Bayes-optimal posteriors.
//!
//! The crate is `no_std` with `alloc`; file formats, networking and the CLI
//! live in the `raceimpute` crate.

#![no_std]
extern crate alloc;

pub mod bayes;
pub mod data;
pub mod error;
pub mod eval;
pub mod gbdt;
pub mod lstm;
pub mod names;
pub mod pipeline;
pub mod race;
pub mod split;
pub mod synth;

pub use error::{Error, Result};
pub use race::{RaceClass, RaceDistribution, NUM_CLASSES};
