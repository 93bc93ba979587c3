//! File formats, census geocoding, reports and the batch command line for
//! race/ethnicity imputation. The models live in `raceimpute-core`.

pub mod artifact;
pub mod bench;
pub mod cli;
pub mod error;
pub mod geocode;
pub mod io;
pub mod manifest;
pub mod report;
