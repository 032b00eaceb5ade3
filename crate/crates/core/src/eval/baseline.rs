//! Random multitokens, the floor every learned scheme has to beat.

use std::collections::BTreeMap;

use rand::Rng as _;

use crate::quantizer::{disambiguate, Multitoken};
use crate::seed::rng_for;

/// Uniform tokens in `[0, s)` per level, then disambiguated.
pub fn random_baseline_tokens<S: AsRef<str>>(entities: &[S], k: usize, s: usize, seed: u64) -> BTreeMap<String, Multitoken> {
    let mut rng = rng_for(seed, "random_baseline");
    let raw: BTreeMap<String, Multitoken> = entities
        .iter()
        .map(|e| {
            let tokens = (0..k).map(|_| rng.random_range(0..s)).collect();
            (e.as_ref().to_string(), Multitoken::new(tokens))
        })
        .collect();
    disambiguate(&raw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn deterministic_and_injective() {
        let ents: Vec<String> = (0..500).map(|i| format!("e{i}")).collect();
        let a = random_baseline_tokens(&ents, 2, 4, 7);
        assert_eq!(a, random_baseline_tokens(&ents, 2, 4, 7));
        assert_ne!(a, random_baseline_tokens(&ents, 2, 4, 8));
        let distinct: BTreeSet<&Multitoken> = a.values().collect();
        assert_eq!(distinct.len(), ents.len());
    }

    #[test]
    fn marginals_pass_chi_square() {
        let (k, s, n) = (3, 16, 10_000);
        let ents: Vec<String> = (0..n).map(|i| format!("e{i}")).collect();
        let tokens = random_baseline_tokens(&ents, k, s, 1);
        let critical = ChiSquared::new((s - 1) as f64).unwrap().inverse_cdf(0.99);
        for level in 0..k {
            let mut counts = vec![0usize; s];
            for mt in tokens.values() {
                counts[mt.tokens[level]] += 1;
            }
            let expected = n as f64 / s as f64;
            let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            assert!(stat < critical, "level {level}: chi2 {stat} >= {critical}");
        }
    }
}
