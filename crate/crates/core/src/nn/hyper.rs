//! Poincaré-ball operations recorded on a [`Tape`].
//!
//! Every function treats each row of its inputs as one point (or tangent
//! vector at the origin), so a whole batch costs a fixed number of nodes.
//! They are built from tape primitives only, which gives their gradients for
//! free and keeps them numerically identical to [`crate::geometry`] up to
//! rounding order.

use crate::geometry::PoincareBall;
use crate::nn::tape::{Tape, Var};

/// Repeat a `1 x n` row `m` times.
pub fn expand_rows(t: &mut Tape, x: Var, m: usize) -> Var {
    if t.shape(x).0 == m {
        return x;
    }
    assert_eq!(t.shape(x).0, 1, "only single rows broadcast");
    t.gather_rows(x, &vec![0; m])
}

/// Row-wise Euclidean norms as an `m x 1` column.
pub fn row_norms(t: &mut Tape, x: Var) -> Var {
    let n2 = t.row_dot(x, x);
    t.sqrt(n2)
}

pub fn project(t: &mut Tape, ball: &PoincareBall, x: Var) -> Var {
    t.project_rows(x, ball.curvature().max_norm())
}

/// `exp_0(v) = tanh(sqrt(c)|v|) v / (sqrt(c)|v|)`, projected.
pub fn exp0(t: &mut Tape, ball: &PoincareBall, v: Var) -> Var {
    let sc = ball.curvature().sqrt();
    let n = row_norms(t, v);
    let arg = t.affine(n, sc, 0.0);
    let f = t.tanh_ratio(arg);
    let y = t.scale_rows(v, f);
    project(t, ball, y)
}

/// `log_0(y) = artanh(sqrt(c)|y|) y / (sqrt(c)|y|)`.
pub fn log0(t: &mut Tape, ball: &PoincareBall, y: Var) -> Var {
    let sc = ball.curvature().sqrt();
    let n = row_norms(t, y);
    let arg = t.affine(n, sc, 0.0);
    let f = t.artanh_ratio(arg);
    t.scale_rows(y, f)
}

/// Row-wise Möbius addition `x (+) y`; a single-row `y` broadcasts.
pub fn mobius_add(t: &mut Tape, ball: &PoincareBall, x: Var, y: Var) -> Var {
    let c = ball.c();
    let y = expand_rows(t, y, t.shape(x).0);
    let xy = t.row_dot(x, y);
    let x2 = t.row_dot(x, x);
    let y2 = t.row_dot(y, y);
    // 1 + 2c<x,y> + c|y|^2
    let a = t.affine(xy, 2.0 * c, 1.0);
    let cy2 = t.affine(y2, c, 0.0);
    let coef_x = t.add(a, cy2);
    // 1 - c|x|^2
    let coef_y = t.affine(x2, -c, 1.0);
    // 1 + 2c<x,y> + c^2|x|^2|y|^2
    let x2y2 = t.mul(x2, y2);
    let cc = t.affine(x2y2, c * c, 0.0);
    let den = t.add(a, cc);
    let px = t.scale_rows(x, coef_x);
    let py = t.scale_rows(y, coef_y);
    let num = t.add(px, py);
    let inv = t.recip(den);
    let out = t.scale_rows(num, inv);
    project(t, ball, out)
}

/// `x (-) y = x (+) (-y)`.
pub fn mobius_sub(t: &mut Tape, ball: &PoincareBall, x: Var, y: Var) -> Var {
    let ny = t.neg(y);
    mobius_add(t, ball, x, ny)
}

/// Row-wise geodesic distance, an `m x 1` column.
pub fn distance(t: &mut Tape, ball: &PoincareBall, u: Var, v: Var) -> Var {
    let c = ball.c();
    let diff = t.sub(u, v);
    let d2 = t.row_dot(diff, diff);
    let u2 = t.row_dot(u, u);
    let v2 = t.row_dot(v, v);
    let a = t.affine(u2, -c, 1.0);
    let b = t.affine(v2, -c, 1.0);
    let den = t.mul(a, b);
    let inv = t.recip(den);
    let q = t.mul(d2, inv);
    let arg = t.affine(q, 2.0 * c, 1.0);
    let ac = t.arcosh(arg);
    t.affine(ac, 1.0 / ball.curvature().sqrt(), 0.0)
}

/// Row-wise squared geodesic distance.
pub fn sq_distance(t: &mut Tape, ball: &PoincareBall, u: Var, v: Var) -> Var {
    let d = distance(t, ball, u, v);
    t.mul(d, d)
}

/// Row-wise Euclidean distance.
pub fn euclidean_distance(t: &mut Tape, u: Var, v: Var) -> Var {
    let diff = t.sub(u, v);
    row_norms(t, diff)
}

/// Row-wise squared Euclidean distance.
pub fn euclidean_sq_distance(t: &mut Tape, u: Var, v: Var) -> Var {
    let diff = t.sub(u, v);
    t.row_dot(diff, diff)
}

/// `exp_0(ReLU(log_0(x)))`.
pub fn hrelu(t: &mut Tape, ball: &PoincareBall, x: Var) -> Var {
    let l = log0(t, ball, x);
    let r = t.relu(l);
    exp0(t, ball, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ball() -> PoincareBall {
        PoincareBall::with_curvature(1.3).unwrap()
    }

    const PTS: [[f64; 3]; 3] = [[0.2, -0.3, 0.1], [0.5, 0.4, -0.2], [0.0, 0.0, 0.0]];
    const QTS: [[f64; 3]; 3] = [[-0.4, 0.1, 0.3], [0.1, 0.1, 0.6], [0.3, -0.2, 0.0]];

    fn batch(t: &mut Tape, rows: &[[f64; 3]; 3]) -> Var {
        t.leaf(3, 3, rows.iter().flatten().copied().collect())
    }

    #[test]
    fn composites_match_direct_geometry() {
        let b = ball();
        let mut t = Tape::new();
        let x = batch(&mut t, &PTS);
        let y = batch(&mut t, &QTS);
        let add = mobius_add(&mut t, &b, x, y);
        let sub = mobius_sub(&mut t, &b, x, y);
        let dist = distance(&mut t, &b, x, y);
        let e = exp0(&mut t, &b, y);
        let l = log0(&mut t, &b, x);
        let h = hrelu(&mut t, &b, x);
        for i in 0..3 {
            let r = i * 3..i * 3 + 3;
            let direct = b.mobius_add(&PTS[i], &QTS[i]);
            for (a, d) in t.value(add)[r.clone()].iter().zip(&direct) {
                assert_abs_diff_eq!(a, d, epsilon = 1e-14);
            }
            let direct = b.mobius_sub(&PTS[i], &QTS[i]);
            for (a, d) in t.value(sub)[r.clone()].iter().zip(&direct) {
                assert_abs_diff_eq!(a, d, epsilon = 1e-14);
            }
            assert_abs_diff_eq!(t.value(dist)[i], b.distance(&PTS[i], &QTS[i]), epsilon = 1e-13);
            let direct = b.exp0(&QTS[i]);
            for (a, d) in t.value(e)[r.clone()].iter().zip(&direct) {
                assert_abs_diff_eq!(a, d, epsilon = 1e-14);
            }
            let direct = b.log0(&PTS[i]);
            for (a, d) in t.value(l)[r.clone()].iter().zip(&direct) {
                assert_abs_diff_eq!(a, d, epsilon = 1e-14);
            }
            let relu: Vec<f64> = b.log0(&PTS[i]).iter().map(|v| v.max(0.0)).collect();
            let direct = b.exp0(&relu);
            for (a, d) in t.value(h)[r].iter().zip(&direct) {
                assert_abs_diff_eq!(a, d, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn single_row_broadcasts_in_mobius_add() {
        let b = ball();
        let mut t = Tape::new();
        let x = batch(&mut t, &PTS);
        let bias = t.vector(&[0.1, 0.0, -0.1]);
        let out = mobius_add(&mut t, &b, x, bias);
        assert_eq!(t.shape(out), (3, 3));
        let direct = b.mobius_add(&PTS[1], &[0.1, 0.0, -0.1]);
        for (a, d) in t.value(out)[3..6].iter().zip(&direct) {
            assert_abs_diff_eq!(a, d, epsilon = 1e-14);
        }
    }

    #[test]
    fn hrelu_cases() {
        let b = ball();
        let mut t = Tape::new();
        let pos = t.vector(&[0.2, 0.3]);
        let neg = t.vector(&[-0.2, -0.3]);
        let hp = hrelu(&mut t, &b, pos);
        let hn = hrelu(&mut t, &b, neg);
        assert_abs_diff_eq!(t.value(hp)[0], 0.2, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(hp)[1], 0.3, epsilon = 1e-12);
        assert_eq!(t.value(hn), &[0.0, 0.0]);
    }

    #[test]
    fn distance_gradient_at_coincident_points_is_finite() {
        let b = ball();
        let mut t = Tape::new();
        let u = t.vector(&[0.1, 0.2]);
        let v = t.vector(&[0.1, 0.2]);
        let d = sq_distance(&mut t, &b, u, v);
        let s = t.sum(d);
        t.backward(s).unwrap();
        assert!(t.grad(u).iter().all(|g| g.is_finite()));
    }
}
