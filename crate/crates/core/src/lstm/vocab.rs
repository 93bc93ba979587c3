use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{GeoMode, GeoVector, LstmGeoConfig, GEO_FEATURES};
use crate::error::{Error, Result};
use crate::names::normalize_name;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const SEP: u32 = 2;
const LETTER_A: u32 = 3;
const APOSTROPHE: u32 = 29;
const HYPHEN: u32 = 30;
const SPACE: u32 = 31;

/// PAD, UNK, SEP, `a`..=`z`, apostrophe, hyphen, space.
pub const BASE_VOCAB_SIZE: usize = 32;
pub const GEO_BINS: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence(pub Vec<u32>);

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Drops trailing PAD ids left by batching.
    pub fn content(&self) -> &[u32] {
        let end = self.0.iter().rposition(|&t| t != PAD).map_or(0, |p| p + 1);
        &self.0[..end]
    }
}

/// Symbol table stored alongside model weights.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub symbols: Vec<String>,
}

impl Vocabulary {
    pub fn for_mode(mode: GeoMode) -> Self {
        let mut symbols: Vec<String> = ["<pad>", "<unk>", "<sep>"].iter().map(|s| s.to_string()).collect();
        symbols.extend(('a'..='z').map(|c| c.to_string()));
        symbols.extend(["'", "-", " "].iter().map(|s| s.to_string()));
        if mode == GeoMode::PrefixTokens {
            for feature in 0..GEO_FEATURES {
                for bin in 0..GEO_BINS {
                    symbols.push(format!("<geo{feature}:{bin}>"));
                }
            }
        }
        Vocabulary { symbols }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

fn char_token(c: char) -> u32 {
    match c {
        'a'..='z' => LETTER_A + (c as u32 - 'a' as u32),
        '\'' => APOSTROPHE,
        '-' => HYPHEN,
        ' ' => SPACE,
        _ => UNK,
    }
}

/// `first SEP [middle SEP] last`, each field normalized. Sequences longer
/// than `max_len` keep their tail so surname endings survive.
pub fn tokenize(first: &str, middle: Option<&str>, last: &str, config: &LstmGeoConfig) -> Result<TokenSequence> {
    let last = normalize_name(last);
    if last.is_empty() {
        return Err(Error::EmptyLastName);
    }
    let mut ids: Vec<u32> = normalize_name(first).chars().map(char_token).collect();
    ids.push(SEP);
    if config.use_middle_name {
        if let Some(m) = middle.map(normalize_name).filter(|m| !m.is_empty()) {
            ids.extend(m.chars().map(char_token));
            ids.push(SEP);
        }
    }
    ids.extend(last.chars().map(char_token));
    if ids.len() > config.max_len {
        ids.drain(..ids.len() - config.max_len);
    }
    Ok(TokenSequence(ids))
}

/// One token per geo feature: `BASE_VOCAB_SIZE + feature * GEO_BINS + bin`.
pub fn geo_prefix_tokens(geo: &GeoVector) -> [u32; GEO_FEATURES] {
    core::array::from_fn(|k| {
        let v = geo.0[k].clamp(0.0, 1.0);
        let bin = (libm::floor(v * GEO_BINS as f64) as usize).min(GEO_BINS - 1);
        (BASE_VOCAB_SIZE + k * GEO_BINS + bin) as u32
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::race::RaceDistribution;
    use alloc::vec;

    #[test]
    fn hand_encoded_examples() {
        let c = LstmGeoConfig::desk();
        assert_eq!(tokenize("al", None, "bo", &c).unwrap().0, vec![3, 14, 2, 4, 17]);
        assert_eq!(tokenize("", None, "x", &c).unwrap().0, vec![2, 26]);
        assert_eq!(tokenize("a", None, "", &c), Err(Error::EmptyLastName));
        assert_eq!(
            tokenize("Jo", Some("Ann"), "O'Neil-Díaz", &c).unwrap().0,
            vec![12, 17, 2, 3, 16, 16, 2, 17, 29, 16, 7, 11, 14, 30, 6, 11, 3, 28]
        );
        assert_eq!(tokenize("x7", None, "y", &c).unwrap().0, vec![26, UNK, SEP, 27]);
    }

    #[test]
    fn middle_name_flag() {
        let mut c = LstmGeoConfig::desk();
        c.use_middle_name = false;
        assert_eq!(tokenize("a", Some("b"), "c", &c).unwrap().0, vec![3, 2, 5]);
        c.use_middle_name = true;
        assert_eq!(tokenize("a", Some("b"), "c", &c).unwrap().0, vec![3, 2, 4, 2, 5]);
        assert_eq!(tokenize("a", Some("  "), "c", &c).unwrap().0, vec![3, 2, 5]);
    }

    #[test]
    fn truncation_keeps_the_tail() {
        let c = LstmGeoConfig::desk();
        let long: String = core::iter::repeat_n('a', 99).chain(core::iter::once('z')).collect();
        let t = tokenize(&long, None, &long, &c).unwrap();
        assert_eq!(t.len(), 60);
        assert_eq!(*t.0.last().unwrap(), 28);
    }

    #[test]
    fn geo_tokens_bin_each_feature() {
        let geo = GeoVector::new(&RaceDistribution::new([0.0, 0.05, 0.15, 0.3, 0.5]).unwrap(), 1.0).unwrap();
        assert_eq!(geo_prefix_tokens(&geo), [32, 42, 53, 65, 77, 91]);
        assert_eq!(Vocabulary::for_mode(GeoMode::PrefixTokens).len(), 92);
        assert_eq!(Vocabulary::for_mode(GeoMode::Head).len(), BASE_VOCAB_SIZE);
    }

    #[test]
    fn content_strips_padding() {
        assert_eq!(TokenSequence(vec![5, 6, 0, 0]).content(), &[5, 6]);
    }
}
