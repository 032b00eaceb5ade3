//! Mapping of multitokens onto one probe vocabulary.
//!
//! Ids 0 and 1 are padding and beginning-of-sequence. Level `i` owns the
//! segment `2 + i*s .. 2 + (i+1)*s`, and the disambiguator owns a final
//! segment after the last level, so no two positions share ids.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizer::Multitoken;

pub const PAD: usize = 0;
pub const BOS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLayout {
    pub k: usize,
    pub s: usize,
    /// Size of the disambiguator segment.
    pub d: usize,
}

impl TokenLayout {
    /// Layout wide enough for every multitoken in `tokens`.
    pub fn for_tokens<'a>(k: usize, s: usize, tokens: impl IntoIterator<Item = &'a Multitoken>) -> Result<Self> {
        let mut d = 1;
        for mt in tokens {
            if mt.tokens.len() != k {
                return Err(Error::Data(format!("multitoken of length {} in a k = {k} scheme", mt.tokens.len())));
            }
            if let Some(&t) = mt.tokens.iter().find(|&&t| t >= s) {
                return Err(Error::Data(format!("token {t} outside vocabulary of size {s}")));
            }
            d = d.max(mt.disambiguator.unwrap_or(0) + 1);
        }
        Ok(TokenLayout { k, s, d })
    }

    pub fn vocab(&self) -> usize {
        2 + self.k * self.s + self.d
    }

    /// Positions per multitoken, disambiguator included.
    pub fn positions(&self) -> usize {
        self.k + 1
    }

    /// First global id and size of position `p`'s segment.
    pub fn segment(&self, p: usize) -> (usize, usize) {
        if p < self.k {
            (2 + p * self.s, self.s)
        } else {
            (2 + self.k * self.s, self.d)
        }
    }

    /// Position-local ids (level tokens then disambiguator).
    pub fn local(&self, mt: &Multitoken) -> Vec<usize> {
        let mut v = mt.tokens.clone();
        v.push(mt.disambiguator.unwrap_or(0));
        v
    }

    pub fn from_local(&self, local: &[usize]) -> Multitoken {
        Multitoken::with_disambiguator(local[..self.k].to_vec(), local[self.k])
    }

    /// Global ids of one multitoken.
    pub fn encode(&self, mt: &Multitoken) -> Vec<usize> {
        self.local(mt)
            .into_iter()
            .enumerate()
            .map(|(p, t)| self.segment(p).0 + t)
            .collect()
    }

    /// Reverse map from multitoken to entity for validity checks.
    pub fn index(tokens: &BTreeMap<String, Multitoken>) -> BTreeMap<Multitoken, String> {
        tokens.iter().map(|(k, v)| (v.clone(), k.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_do_not_overlap() {
        let mts = [Multitoken::with_disambiguator(vec![3, 1], 2)];
        let l = TokenLayout::for_tokens(2, 4, &mts).unwrap();
        assert_eq!(l.vocab(), 2 + 8 + 3);
        assert_eq!(l.encode(&mts[0]), vec![5, 7, 12]);
        assert_eq!(l.from_local(&l.local(&mts[0])), mts[0]);
        assert!(TokenLayout::for_tokens(2, 2, &mts).is_err());
    }
}
