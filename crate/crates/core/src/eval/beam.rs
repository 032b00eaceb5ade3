//! Beam search over position-wise token segments.

use crate::error::{Error, Result};

/// Supplies next-position log-probabilities for a batch of prefixes.
pub trait StepScorer {
    /// Number of positions in a complete sequence.
    fn positions(&self) -> usize;

    /// Log-probabilities over the segment of position `prefixes[j].len()`
    /// for every prefix (all prefixes have the same length).
    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>>;
}

/// Ranked complete sequences with their total log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPrediction {
    pub candidates: Vec<Vec<usize>>,
    pub scores: Vec<f64>,
}

/// Keep the `width` best partial sequences at every position and return
/// the `k` best complete ones. Ties are broken by the lexicographically
/// smaller sequence, so the result is deterministic.
pub fn beam_search<S: StepScorer + ?Sized>(scorer: &S, k: usize, width: usize) -> Result<RankedPrediction> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if k > width {
        return Err(Error::Config(format!("K = {k} exceeds beam width {width}")));
    }
    let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for _ in 0..scorer.positions() {
        let prefixes: Vec<Vec<usize>> = beams.iter().map(|b| b.0.clone()).collect();
        let lp = scorer.log_probs(&prefixes);
        let mut next: Vec<(Vec<usize>, f64)> = Vec::with_capacity(beams.len() * lp.first().map_or(0, Vec::len));
        for ((prefix, score), row) in beams.iter().zip(&lp) {
            for (tok, l) in row.iter().enumerate() {
                let mut seq = prefix.clone();
                seq.push(tok);
                next.push((seq, score + l));
            }
        }
        next.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        next.truncate(width);
        beams = next;
    }
    beams.truncate(k);
    Ok(RankedPrediction {
        scores: beams.iter().map(|b| b.1).collect(),
        candidates: beams.into_iter().map(|b| b.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Fixed per-position logits independent of the prefix, plus an
    /// optional bonus for a specific first/second pair.
    struct Table {
        logits: Vec<Vec<f64>>,
        bonus: Option<([usize; 2], f64)>,
    }

    impl StepScorer for Table {
        fn positions(&self) -> usize {
            self.logits.len()
        }

        fn log_probs(&self, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
            prefixes
                .iter()
                .map(|p| {
                    let mut row = self.logits[p.len()].clone();
                    if let (Some((pair, b)), 1) = (self.bonus, p.len()) {
                        if p[0] == pair[0] {
                            row[pair[1]] += b;
                        }
                    }
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    row.iter().map(|x| x - lse).collect()
                })
                .collect()
        }
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let t = Table {
            logits: vec![vec![0.3, 1.0, -0.5], vec![0.2, 0.1, 0.9]],
            bonus: Some(([2, 0], 3.0)),
        };
        let mut all = Vec::new();
        for a in 0..3 {
            for b in 0..3 {
                let s0 = t.log_probs(&[vec![]])[0][a];
                let s1 = t.log_probs(&[vec![a]])[0][b];
                all.push((vec![a, b], s0 + s1));
            }
        }
        all.sort_by(|x, y| y.1.total_cmp(&x.1));
        let got = beam_search(&t, 3, 9).unwrap();
        let expect: Vec<Vec<usize>> = all[..3].iter().map(|x| x.0.clone()).collect();
        assert_eq!(got.candidates, expect);
    }

    #[test]
    fn width_one_is_greedy_and_k_is_checked() {
        let t = Table {
            logits: vec![vec![0.0, 2.0], vec![1.0, 0.0]],
            bonus: None,
        };
        assert_eq!(beam_search(&t, 1, 1).unwrap().candidates, vec![vec![1, 0]]);
        assert!(matches!(beam_search(&t, 3, 2), Err(Error::Config(_))));
    }
}
