//! Surname-geography (BISG) and first-name-surname-geography (BIFSG) posteriors
//! under conditional independence of the evidence given race.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::race::{RaceClass, RaceDistribution, NUM_CLASSES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BayesInputs {
    /// `P(race | surname)`
    pub surname_prior: RaceDistribution,
    /// `P(race | first name)`
    pub firstname_prior: Option<RaceDistribution>,
    /// `P(race | tract)`
    pub tract_composition: RaceDistribution,
    /// `P(race)`, strictly positive.
    pub marginal: RaceDistribution,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub dist: RaceDistribution,
    /// Set when the evidence multiplied out to zero everywhere and a less
    /// informative model's answer was returned instead.
    pub degenerate: bool,
}

/// Normalizes `scale * weights`. `None` when every weight is zero.
pub(crate) fn normalize_scaled(weights: [f64; NUM_CLASSES], scale: f64) -> Option<RaceDistribution> {
    let scaled = weights.map(|w| w * scale);
    let sum: f64 = scaled.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        Some(RaceDistribution::from_weights(scaled).ok()?)
    } else {
        None
    }
}

fn check_marginal(marginal: &RaceDistribution) -> Result<()> {
    if marginal.is_strictly_positive() {
        Ok(())
    } else {
        Err(Error::InvalidMarginal)
    }
}

/// `P(r | s, g) ∝ P(r | s) P(r | g) / P(r)`. Falls back to the surname prior
/// when the product vanishes for every class.
pub fn bisg_posterior(inputs: &BayesInputs) -> Result<Posterior> {
    check_marginal(&inputs.marginal)?;
    let s = inputs.surname_prior.probs();
    let g = inputs.tract_composition.probs();
    let m = inputs.marginal.probs();
    let w: [f64; NUM_CLASSES] = core::array::from_fn(|r| s[r] * g[r] / m[r]);
    Ok(match normalize_scaled(w, 1.0) {
        Some(dist) => Posterior {
            dist,
            degenerate: false,
        },
        None => Posterior {
            dist: inputs.surname_prior,
            degenerate: true,
        },
    })
}

/// `P(r | f, s, g) ∝ P(r | f) P(r | s) P(r | g) / P(r)^2`. Falls back to
/// [`bisg_posterior`] when the product vanishes for every class.
pub fn bifsg_posterior(inputs: &BayesInputs) -> Result<Posterior> {
    let f = inputs
        .firstname_prior
        .ok_or(Error::MissingFirstNamePrior)?;
    check_marginal(&inputs.marginal)?;
    let f = f.probs();
    let s = inputs.surname_prior.probs();
    let g = inputs.tract_composition.probs();
    let m = inputs.marginal.probs();
    let w: [f64; NUM_CLASSES] = core::array::from_fn(|r| f[r] * s[r] * g[r] / (m[r] * m[r]));
    match normalize_scaled(w, 1.0) {
        Some(dist) => Ok(Posterior {
            dist,
            degenerate: false,
        }),
        None => bisg_posterior(inputs).map(|p| Posterior {
            dist: p.dist,
            degenerate: true,
        }),
    }
}

pub fn classify(dist: &RaceDistribution) -> RaceClass {
    dist.classify()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(p: [f64; 5]) -> RaceDistribution {
        RaceDistribution::new(p).unwrap()
    }

    fn close(a: &RaceDistribution, b: &RaceDistribution, tol: f64) -> bool {
        a.probs().iter().zip(b.probs()).all(|(x, y)| (x - y).abs() <= tol)
    }

    const MARGINAL: [f64; 5] = [0.6, 0.13, 0.18, 0.06, 0.03];

    #[test]
    fn garcia_in_a_black_tract_stays_hispanic() {
        let inputs = BayesInputs {
            surname_prior: d([0.05, 0.005, 0.92, 0.015, 0.01]),
            firstname_prior: None,
            tract_composition: d([0.2, 0.6, 0.1, 0.05, 0.05]),
            marginal: d(MARGINAL),
        };
        let p = bisg_posterior(&inputs).unwrap();
        // exact rational evaluation of the product-and-normalize formula
        let expected = d([
            0.028_734_573_586_295_82,
            0.039_786_332_657_948_06,
            0.881_193_589_979_738_4,
            0.021_550_930_189_721_863,
            0.028_734_573_586_295_82,
        ]);
        assert!(close(&p.dist, &expected, 1e-12), "{:?}", p.dist);
        assert_eq!(p.dist.classify(), RaceClass::Hispanic);
        assert!(!p.degenerate);
    }

    #[test]
    fn bifsg_black_first_name_wins() {
        let inputs = BayesInputs {
            surname_prior: d([0.6, 0.2, 0.1, 0.05, 0.05]),
            firstname_prior: Some(d([0.1, 0.7, 0.1, 0.05, 0.05])),
            tract_composition: d([0.3, 0.5, 0.1, 0.05, 0.05]),
            marginal: d(MARGINAL),
        };
        let p = bifsg_posterior(&inputs).unwrap();
        assert_eq!(p.dist.classify(), RaceClass::Black);
        let expected = d([
            0.011_372_716_074_024_427,
            0.942_118_491_339_301_6,
            0.007_020_195_107_422_486,
            0.007_897_719_495_850_296,
            0.031_590_877_983_401_18,
        ]);
        assert!(close(&p.dist, &expected, 1e-12), "{:?}", p.dist);
    }

    #[test]
    fn tract_equal_to_marginal_cancels() {
        let s = d([0.1, 0.2, 0.3, 0.25, 0.15]);
        let inputs = BayesInputs {
            surname_prior: s,
            firstname_prior: None,
            tract_composition: d(MARGINAL),
            marginal: d(MARGINAL),
        };
        assert!(close(&bisg_posterior(&inputs).unwrap().dist, &s, 1e-12));
    }

    #[test]
    fn one_hot_surname_absorbs() {
        let white = RaceDistribution::one_hot(RaceClass::White);
        let inputs = BayesInputs {
            surname_prior: white,
            firstname_prior: None,
            tract_composition: d([0.1, 0.6, 0.1, 0.1, 0.1]),
            marginal: d(MARGINAL),
        };
        assert_eq!(bisg_posterior(&inputs).unwrap().dist, white);
    }

    #[test]
    fn uninformative_inputs_return_marginal() {
        let m = d(MARGINAL);
        let inputs = BayesInputs {
            surname_prior: m,
            firstname_prior: Some(m),
            tract_composition: m,
            marginal: m,
        };
        assert!(close(&bifsg_posterior(&inputs).unwrap().dist, &m, 1e-12));
    }

    #[test]
    fn zero_product_falls_back() {
        let inputs = BayesInputs {
            surname_prior: RaceDistribution::one_hot(RaceClass::Asian),
            firstname_prior: Some(RaceDistribution::one_hot(RaceClass::Black)),
            tract_composition: d([0.5, 0.5, 0.0, 0.0, 0.0]),
            marginal: d(MARGINAL),
        };
        let bisg = bisg_posterior(&inputs).unwrap();
        assert!(bisg.degenerate);
        assert_eq!(bisg.dist, inputs.surname_prior);
        let bifsg = bifsg_posterior(&inputs).unwrap();
        assert!(bifsg.degenerate);
        assert_eq!(bifsg.dist, inputs.surname_prior);
    }

    #[test]
    fn errors() {
        let inputs = BayesInputs {
            surname_prior: RaceDistribution::UNIFORM,
            firstname_prior: None,
            tract_composition: RaceDistribution::UNIFORM,
            marginal: RaceDistribution::one_hot(RaceClass::White),
        };
        assert_eq!(bisg_posterior(&inputs), Err(Error::InvalidMarginal));
        assert_eq!(bifsg_posterior(&inputs), Err(Error::MissingFirstNamePrior));
        let inputs = BayesInputs {
            firstname_prior: Some(RaceDistribution::UNIFORM),
            ..inputs
        };
        assert_eq!(bifsg_posterior(&inputs), Err(Error::InvalidMarginal));
    }

    fn dist() -> impl Strategy<Value = RaceDistribution> {
        proptest::array::uniform5(0.0f64..1.0)
            .prop_filter("non-zero", |w| w.iter().sum::<f64>() > 1e-3)
            .prop_map(|w| RaceDistribution::from_weights(w).unwrap())
    }

    fn positive_dist() -> impl Strategy<Value = RaceDistribution> {
        proptest::array::uniform5(0.01f64..1.0).prop_map(|w| RaceDistribution::from_weights(w).unwrap())
    }

    proptest! {
        #[test]
        fn cancellation_identities(s in dist(), f in dist(), m in positive_dist()) {
            let inputs = BayesInputs { surname_prior: s, firstname_prior: Some(m), tract_composition: m, marginal: m };
            prop_assert!(close(&bisg_posterior(&inputs).unwrap().dist, &s, 1e-12));

            let inputs = BayesInputs { surname_prior: s, firstname_prior: Some(m), tract_composition: f, marginal: m };
            let bisg = bisg_posterior(&inputs).unwrap();
            let bifsg = bifsg_posterior(&inputs).unwrap();
            prop_assert_eq!(bisg.degenerate, bifsg.degenerate);
            prop_assert!(close(&bisg.dist, &bifsg.dist, 1e-12));
        }

        #[test]
        fn scale_invariance(w in proptest::array::uniform5(0.0f64..1.0), scale in 1e-6f64..1e6) {
            prop_assume!(w.iter().sum::<f64>() > 1e-6);
            let a = normalize_scaled(w, 1.0).unwrap();
            let b = normalize_scaled(w, scale).unwrap();
            prop_assert!(close(&a, &b, 1e-12));
        }

        #[test]
        fn raising_tract_share_never_lowers_posterior(
            s in positive_dist(), g in positive_dist(), m in positive_dist(),
            class in 0usize..5, bump in 0.0f64..0.5,
        ) {
            let base = BayesInputs { surname_prior: s, firstname_prior: None, tract_composition: g, marginal: m };
            let mut w = *g.probs();
            w[class] += bump;
            let raised = BayesInputs { tract_composition: RaceDistribution::from_weights(w).unwrap(), ..base };
            let before = bisg_posterior(&base).unwrap().dist.probs()[class];
            let after = bisg_posterior(&raised).unwrap().dist.probs()[class];
            prop_assert!(after >= before - 1e-12);
        }
    }
}
