//! The five-class race/ethnicity label set and probability vectors over it.

use core::fmt;
use core::ops::Index;
use core::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 5;

/// Absolute tolerance on the component sum of a [`RaceDistribution`].
pub const SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RaceClass {
    White = 0,
    Black = 1,
    Hispanic = 2,
    Asian = 3,
    Other = 4,
}

impl RaceClass {
    pub const ALL: [RaceClass; NUM_CLASSES] = [
        RaceClass::White,
        RaceClass::Black,
        RaceClass::Hispanic,
        RaceClass::Asian,
        RaceClass::Other,
    ];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<RaceClass> {
        Self::ALL.get(code).copied()
    }

    /// Canonical lower-case name used on write.
    pub fn as_str(self) -> &'static str {
        match self {
            RaceClass::White => "white",
            RaceClass::Black => "black",
            RaceClass::Hispanic => "hispanic",
            RaceClass::Asian => "asian",
            RaceClass::Other => "other",
        }
    }
}

impl fmt::Display for RaceClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RaceClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        RaceClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownSourceCode(s.into()))
    }
}

impl Serialize for RaceClass {
    fn serialize<S: Serializer>(&self, s: S) -> core::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RaceClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = RaceClass;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a race class name")
            }
            fn visit_str<E: serde::de::Error>(self, s: &str) -> core::result::Result<RaceClass, E> {
                s.parse().map_err(E::custom)
            }
        }
        d.deserialize_str(V)
    }
}

/// Probability vector over [`RaceClass`], components in `[0, 1]` summing to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(transparent)]
pub struct RaceDistribution([f64; NUM_CLASSES]);

impl RaceDistribution {
    pub const UNIFORM: RaceDistribution = RaceDistribution([0.2; NUM_CLASSES]);

    /// Validates an already-normalized vector.
    pub fn new(p: [f64; NUM_CLASSES]) -> Result<Self> {
        if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Invariant(alloc::format!(
                "distribution components must lie in [0, 1]: {p:?}"
            )));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Invariant(alloc::format!(
                "distribution sums to {sum}, expected 1"
            )));
        }
        Ok(RaceDistribution(p))
    }

    /// Normalizes non-negative weights. Fails when the weights are all zero
    /// or contain a negative or non-finite entry.
    pub fn from_weights(w: [f64; NUM_CLASSES]) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invariant(alloc::format!(
                "weights must be finite and non-negative: {w:?}"
            )));
        }
        let sum: f64 = w.iter().sum();
        if sum <= 0.0 || !sum.is_finite() {
            return Err(Error::Invariant("weights sum to zero".into()));
        }
        Ok(RaceDistribution(w.map(|v| v / sum)))
    }

    pub fn one_hot(class: RaceClass) -> Self {
        let mut p = [0.0; NUM_CLASSES];
        p[class.code()] = 1.0;
        RaceDistribution(p)
    }

    /// Softmax over logits, shifted by the maximum for stability.
    pub fn softmax(logits: &[f64; NUM_CLASSES]) -> Self {
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e = logits.map(|z| libm::exp(z - max));
        let sum: f64 = e.iter().sum();
        RaceDistribution(e.map(|v| v / sum))
    }

    pub fn probs(&self) -> &[f64; NUM_CLASSES] {
        &self.0
    }

    pub fn get(&self, class: RaceClass) -> f64 {
        self.0[class.code()]
    }

    pub fn is_strictly_positive(&self) -> bool {
        self.0.iter().all(|v| *v > 0.0)
    }

    /// Argmax with ties going to the lowest class code.
    pub fn classify(&self) -> RaceClass {
        let mut best = 0;
        for k in 1..NUM_CLASSES {
            if self.0[k] > self.0[best] {
                best = k;
            }
        }
        RaceClass::ALL[best]
    }

    pub fn max_prob(&self) -> f64 {
        self.0[self.classify().code()]
    }
}

impl Index<RaceClass> for RaceDistribution {
    type Output = f64;

    fn index(&self, class: RaceClass) -> &f64 {
        &self.0[class.code()]
    }
}

impl<'de> Deserialize<'de> for RaceDistribution {
    fn deserialize<D: Deserializer<'de>>(d: D) -> core::result::Result<Self, D::Error> {
        let p = <[f64; NUM_CLASSES]>::deserialize(d)?;
        RaceDistribution::new(p).map_err(serde::de::Error::custom)
    }
}
