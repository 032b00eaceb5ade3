//! Randomized invariants for the geometry, quantizer and metrics.

use std::collections::{BTreeMap, BTreeSet};

use hrq::eval::metrics::{mean_std, recall_at_k};
use hrq::geometry::{norm, Curvature, Flavor, PoincareBall};
use hrq::quantizer::{disambiguate, Codebook, Multitoken};
use proptest::prelude::*;

const DIM: usize = 3;

fn curvature() -> impl Strategy<Value = f64> {
    (-1.0f64..1.0).prop_map(|e| 10f64.powf(e))
}

/// A point of the ball with curvature `c`, at most `frac` of the way to the
/// boundary.
fn point(c: f64, frac: f64) -> impl Strategy<Value = Vec<f64>> {
    (prop::collection::vec(-1.0f64..1.0, DIM), 0.0f64..frac).prop_map(move |(dir, r)| {
        let n = norm(&dir).max(1e-9);
        dir.iter().map(|d| d / n * r / c.sqrt()).collect()
    })
}

fn ball_and_points(frac: f64) -> impl Strategy<Value = (PoincareBall, Vec<f64>, Vec<f64>, Vec<f64>)> {
    curvature().prop_flat_map(move |c| {
        (Just(PoincareBall::new(Curvature::new(c).unwrap())), point(c, frac), point(c, frac), point(c, frac))
    })
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn left_cancellation((ball, x, y, _) in ball_and_points(0.9)) {
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        prop_assert!(close(&ball.mobius_add(&neg, &ball.mobius_add(&x, &y)), &y, 1e-9));
    }

    #[test]
    fn distance_is_a_metric((ball, x, y, z) in ball_and_points(0.9)) {
        let (dxy, dyx) = (ball.distance(&x, &y), ball.distance(&y, &x));
        prop_assert!(dxy >= 0.0);
        prop_assert!((dxy - dyx).abs() <= 1e-9 * (1.0 + dxy));
        prop_assert!(ball.distance(&x, &x) <= 1e-7);
        prop_assert!(dxy <= ball.distance(&x, &z) + ball.distance(&z, &y) + 1e-7);
    }

    #[test]
    fn distance_from_origin_has_closed_form((ball, x, _, _) in ball_and_points(0.95)) {
        let sc = ball.c().sqrt();
        let want = 2.0 / sc * (sc * norm(&x)).atanh();
        let got = ball.distance(&vec![0.0; DIM], &x);
        prop_assert!((got - want).abs() <= 1e-9 * (1.0 + want));
    }

    #[test]
    fn exp_log_round_trip((ball, x, y, _) in ball_and_points(0.8)) {
        prop_assert!(close(&ball.exp_map(&x, &ball.log_map(&x, &y)), &y, 1e-8));
        prop_assert!(close(&ball.exp0(&ball.log0(&y)), &y, 1e-10));
    }

    #[test]
    fn projection_lands_inside(c in curvature(), raw in prop::collection::vec(-1e6f64..1e6, DIM)) {
        let ball = PoincareBall::new(Curvature::new(c).unwrap());
        let p = ball.project(&raw);
        prop_assert!(ball.contains(&p));
        prop_assert!(norm(&p) <= Curvature::new(c).unwrap().max_norm() * (1.0 + 1e-12));
    }

    #[test]
    fn tiny_curvature_distance_is_twice_euclidean(
        u in prop::collection::vec(-1.0f64..1.0, DIM),
        v in prop::collection::vec(-1.0f64..1.0, DIM),
    ) {
        let ball = PoincareBall::new(Curvature::new(1e-8).unwrap());
        let e: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!((ball.distance(&u, &v) - 2.0 * e).abs() <= 1e-5 * (1.0 + e));
    }
}

fn codebook(flavor: Flavor, s: usize, k: usize) -> impl Strategy<Value = Codebook> {
    let scale = match flavor.ball() {
        Some(b) => 0.5 / b.c().sqrt() / DIM as f64,
        None => 1.0,
    };
    prop::collection::vec(prop::collection::vec(-scale..scale, s * DIM), k)
        .prop_map(move |levels| Codebook::new(flavor, s, DIM, levels).unwrap())
}

fn flavor() -> impl Strategy<Value = Flavor> {
    prop_oneof![Just(Flavor::Euclidean), curvature().prop_map(|c| Flavor::hyperbolic(c).unwrap())]
}

proptest! {
    #[test]
    fn residual_chain_is_consistent(
        (cb, x) in flavor().prop_flat_map(|f| {
            let c = f.ball().map_or(1.0, |b| b.c());
            (codebook(f, 5, 3), point(c, 0.9))
        })
    ) {
        let q = cb.quantize(&x).unwrap();
        prop_assert_eq!(q.multitoken.tokens.len(), 3);
        prop_assert_eq!(&q.residuals[0], &x);
        for (i, &t) in q.multitoken.tokens.iter().enumerate() {
            prop_assert!(t < 5);
            prop_assert_eq!(&q.codewords[i], cb.codeword(i, t));
            // The chosen codeword is a nearest one for the incoming residual.
            let d = |j: usize| cb.flavor().distance(&q.residuals[i], cb.codeword(i, j));
            prop_assert!((0..5).all(|j| d(t) <= d(j)));
            if i + 1 < q.residuals.len() {
                let next = match cb.flavor().ball() {
                    Some(b) => b.mobius_sub(&q.residuals[i], &q.codewords[i]),
                    None => q.residuals[i].iter().zip(&q.codewords[i]).map(|(r, e)| r - e).collect(),
                };
                prop_assert!(close(&q.residuals[i + 1], &next, 1e-12));
            }
        }
        match cb.flavor().ball() {
            Some(b) => prop_assert!(b.contains(&q.reconstruction)),
            None => {
                let sum: Vec<f64> = (0..DIM).map(|d| q.codewords.iter().map(|e| e[d]).sum()).collect();
                prop_assert!(close(&q.reconstruction, &sum, 1e-12));
            }
        }
    }

    #[test]
    fn disambiguation_makes_identifiers_unique(
        raw in prop::collection::btree_map("[a-z]{1,4}", prop::collection::vec(0usize..2, 2), 0..40)
    ) {
        let input: BTreeMap<String, Multitoken> = raw.into_iter().map(|(k, t)| (k, Multitoken::new(t))).collect();
        let out = disambiguate(&input);
        prop_assert_eq!(out.len(), input.len());
        let distinct: BTreeSet<&Multitoken> = out.values().collect();
        prop_assert_eq!(distinct.len(), out.len());
        for (id, m) in &out {
            prop_assert_eq!(&m.tokens, &input[id].tokens);
            prop_assert!(m.disambiguator.is_some());
        }
    }

    #[test]
    fn recall_is_bounded_and_monotone(
        ranked in prop::collection::vec(0u32..20, 0..15),
        truth in prop::collection::vec(0u32..20, 1..5),
    ) {
        let mut prev = 0.0;
        for k in 1..=15 {
            let r = recall_at_k(&ranked, &truth, k);
            prop_assert!((0.0..=1.0).contains(&r));
            prop_assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn constant_values_have_zero_spread(v in -1e3f64..1e3, n in 1usize..10) {
        let (mean, std) = mean_std(&vec![v; n]);
        prop_assert!((mean - v).abs() <= 1e-12 * (1.0 + v.abs()));
        prop_assert!(std.abs() <= 1e-12 * (1.0 + v.abs()));
    }
}
