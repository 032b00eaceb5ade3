//! Poincaré-ball geometry.
//!
//! All operations work on plain `f64` slices and return freshly allocated
//! vectors. [`PoincareBall`] carries the curvature; [`BallPoint`] and
//! [`TangentVector`] are checked wrappers for callers that want dimension and
//! curvature mismatches reported as errors instead of being a caller bug.
//!
//! Every operation that produces a point on the ball projects its output to
//! the radius `(1 - BOUNDARY_EPS) / sqrt(c)`, so arguments of `artanh` and
//! `arcosh` downstream stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};

/// Multiplicative margin kept between every point and the ball boundary.
pub const BOUNDARY_EPS: f64 = 1e-5;

const ARTANH_LIMIT: f64 = 1.0 - 1e-15;

/// Curvature magnitude `c > 0`; the ball models the space of curvature `-c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature(f64);

impl Curvature {
    pub fn new(c: f64) -> Result<Self> {
        if c.is_finite() && c > 0.0 {
            Ok(Curvature(c))
        } else {
            Err(Error::Config(format!("curvature must be positive and finite, got {c}")))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn sqrt(self) -> f64 {
        self.0.sqrt()
    }

    /// Largest Euclidean norm a point may have after projection.
    pub fn max_norm(self) -> f64 {
        (1.0 - BOUNDARY_EPS) / self.0.sqrt()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Curvature(1.0)
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;
    fn try_from(c: f64) -> Result<Self> {
        Curvature::new(c)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.0
    }
}

/// `artanh` with its argument clamped to `[-1 + 1e-15, 1 - 1e-15]`.
pub fn artanh(x: f64) -> f64 {
    x.clamp(-ARTANH_LIMIT, ARTANH_LIMIT).atanh()
}

/// `arcosh` with its argument clamped to `[1, inf)`.
pub fn arcosh(x: f64) -> f64 {
    let x = x.max(1.0);
    (x + ((x - 1.0) * (x + 1.0)).sqrt()).ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn sq_norm(a: &[f64]) -> f64 {
    dot(a, a)
}

pub fn norm(a: &[f64]) -> f64 {
    sq_norm(a).sqrt()
}

fn scaled(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

fn negated(a: &[f64]) -> Vec<f64> {
    a.iter().map(|x| -x).collect()
}

/// The Poincaré ball of curvature `-c`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PoincareBall {
    c: Curvature,
}

impl PoincareBall {
    pub fn new(c: Curvature) -> Self {
        PoincareBall { c }
    }

    pub fn with_curvature(c: f64) -> Result<Self> {
        Ok(PoincareBall::new(Curvature::new(c)?))
    }

    pub fn curvature(&self) -> Curvature {
        self.c
    }

    pub fn c(&self) -> f64 {
        self.c.0
    }

    /// Whether `x` lies strictly inside the ball.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().all(|v| v.is_finite()) && self.c() * sq_norm(x) < 1.0
    }

    /// `lambda_x = 2 / (1 - c |x|^2)`.
    pub fn conformal_factor(&self, x: &[f64]) -> f64 {
        2.0 / (1.0 - self.c() * sq_norm(x))
    }

    /// Rescale `x` onto the radius `(1 - eps)/sqrt(c)` if it lies on or
    /// beyond it; interior points are returned unchanged.
    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        let limit = 1.0 - BOUNDARY_EPS;
        let n2 = sq_norm(x);
        if self.c() * n2 < limit * limit {
            x.to_vec()
        } else {
            scaled(x, self.c.max_norm() / n2.sqrt())
        }
    }

    /// [`Self::project`] that rejects non-finite input.
    pub fn try_project(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("cannot project a non-finite vector onto the ball".into()));
        }
        Ok(self.project(x))
    }

    pub fn mobius_add(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), y.len());
        let c = self.c();
        let xy = dot(x, y);
        let x2 = sq_norm(x);
        let y2 = sq_norm(y);
        let coef_x = 1.0 + 2.0 * c * xy + c * y2;
        let coef_y = 1.0 - c * x2;
        let den = (1.0 + 2.0 * c * xy + c * c * x2 * y2).max(1e-15);
        let out: Vec<f64> = x
            .iter()
            .zip(y)
            .map(|(a, b)| (coef_x * a + coef_y * b) / den)
            .collect();
        self.project(&out)
    }

    /// `x (-) y = x (+) (-y)`.
    pub fn mobius_sub(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        self.mobius_add(x, &negated(y))
    }

    /// Geodesic distance `(1/sqrt c) arcosh(1 + 2c|u-v|^2 / ((1-c|u|^2)(1-c|v|^2)))`.
    pub fn distance(&self, u: &[f64], v: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), v.len());
        if u == v {
            return 0.0;
        }
        let c = self.c();
        let diff2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        let den = (1.0 - c * sq_norm(u)) * (1.0 - c * sq_norm(v));
        arcosh(1.0 + 2.0 * c * diff2 / den) / self.c.sqrt()
    }

    /// Exponential map at `x` applied to the tangent vector `v`.
    pub fn exp_map(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let vn = norm(v);
        if vn == 0.0 {
            return x.to_vec();
        }
        let sc = self.c.sqrt();
        let lambda = self.conformal_factor(x);
        let step = scaled(v, (sc * lambda * vn / 2.0).tanh() / (sc * vn));
        self.mobius_add(x, &step)
    }

    /// Logarithmic map at `x` of the point `y`.
    pub fn log_map(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        if x == y {
            return vec![0.0; x.len()];
        }
        let w = self.mobius_add(&negated(x), y);
        let wn = norm(&w);
        if wn == 0.0 {
            return vec![0.0; x.len()];
        }
        let sc = self.c.sqrt();
        let lambda = self.conformal_factor(x);
        scaled(&w, 2.0 / (sc * lambda) * artanh(sc * wn) / wn)
    }

    /// `exp_0(v) = tanh(sqrt(c)|v|) v / (sqrt(c)|v|)`.
    pub fn exp0(&self, v: &[f64]) -> Vec<f64> {
        let vn = norm(v);
        if vn == 0.0 {
            return v.to_vec();
        }
        let sc = self.c.sqrt();
        self.project(&scaled(v, (sc * vn).tanh() / (sc * vn)))
    }

    /// `log_0(y) = artanh(sqrt(c)|y|) y / (sqrt(c)|y|)`.
    pub fn log0(&self, y: &[f64]) -> Vec<f64> {
        let yn = norm(y);
        if yn == 0.0 {
            return y.to_vec();
        }
        let sc = self.c.sqrt();
        scaled(y, artanh(sc * yn) / (sc * yn))
    }

    /// `r (x) x = exp_0(r log_0(x))`.
    pub fn mobius_scalar_mul(&self, r: f64, x: &[f64]) -> Vec<f64> {
        self.exp0(&scaled(&self.log0(x), r))
    }

    /// Gyration `gyr[a, b] w = -(a (+) b) (+) (a (+) (b (+) w))`.
    pub fn gyration(&self, a: &[f64], b: &[f64], w: &[f64]) -> Vec<f64> {
        let ab = self.mobius_add(a, b);
        let inner = self.mobius_add(a, &self.mobius_add(b, w));
        self.mobius_add(&negated(&ab), &inner)
    }

    /// Möbius coaddition `a [+] b = a (+) gyr[a, -b] b`. It undoes a right
    /// subtraction: `(a (-) b) [+] b = a`.
    pub fn mobius_coadd(&self, a: &[f64], b: &[f64]) -> Vec<f64> {
        let g = self.gyration(a, &negated(b), b);
        self.mobius_add(a, &g)
    }
}

/// The space a quantizer, layer or embedding table works in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "space", rename_all = "snake_case")]
pub enum Flavor {
    Euclidean,
    Hyperbolic { c: Curvature },
}

impl Flavor {
    pub fn hyperbolic(c: f64) -> Result<Self> {
        Ok(Flavor::Hyperbolic { c: Curvature::new(c)? })
    }

    /// The ball for the hyperbolic flavor, `None` for the Euclidean one.
    pub fn ball(&self) -> Option<PoincareBall> {
        match self {
            Flavor::Euclidean => None,
            Flavor::Hyperbolic { c } => Some(PoincareBall::new(*c)),
        }
    }

    pub fn is_hyperbolic(&self) -> bool {
        matches!(self, Flavor::Hyperbolic { .. })
    }

    /// Distance between two points of this space.
    pub fn distance(&self, u: &[f64], v: &[f64]) -> f64 {
        match self.ball() {
            Some(ball) => ball.distance(u, v),
            None => u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
        }
    }
}

/// A point strictly inside the Poincaré ball of a given curvature.
#[derive(Debug, Clone, PartialEq)]
pub struct BallPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl BallPoint {
    /// Accepts `coords` only if they already satisfy `c|x|^2 < 1`.
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if !PoincareBall::new(curvature).contains(&coords) {
            return Err(Error::Numeric(format!(
                "point outside the ball of curvature {}",
                curvature.value()
            )));
        }
        Ok(BallPoint { coords, curvature })
    }

    /// Projects an arbitrary finite vector onto the ball.
    pub fn projected(raw: &[f64], curvature: Curvature) -> Result<Self> {
        let coords = PoincareBall::new(curvature).try_project(raw)?;
        Ok(BallPoint { coords, curvature })
    }

    pub fn origin(dim: usize, curvature: Curvature) -> Self {
        BallPoint {
            coords: vec![0.0; dim],
            curvature,
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    fn ball(&self) -> PoincareBall {
        PoincareBall::new(self.curvature)
    }

    fn check(&self, other: &BallPoint) -> Result<()> {
        ensure_dim(self.dim(), other.dim())?;
        if self.curvature != other.curvature {
            return Err(Error::CurvatureMismatch {
                left: self.curvature.value(),
                right: other.curvature.value(),
            });
        }
        Ok(())
    }

    pub fn negate(&self) -> BallPoint {
        BallPoint {
            coords: negated(&self.coords),
            curvature: self.curvature,
        }
    }

    pub fn conformal_factor(&self) -> f64 {
        self.ball().conformal_factor(&self.coords)
    }

    pub fn mobius_add(&self, other: &BallPoint) -> Result<BallPoint> {
        self.check(other)?;
        Ok(BallPoint {
            coords: self.ball().mobius_add(&self.coords, &other.coords),
            curvature: self.curvature,
        })
    }

    pub fn mobius_sub(&self, other: &BallPoint) -> Result<BallPoint> {
        self.mobius_add(&other.negate())
    }

    pub fn distance(&self, other: &BallPoint) -> Result<f64> {
        self.check(other)?;
        Ok(self.ball().distance(&self.coords, &other.coords))
    }

    pub fn exp_map(&self, v: &TangentVector) -> Result<BallPoint> {
        self.check(&v.basepoint)?;
        if v.basepoint.coords != self.coords {
            return Err(Error::Usage("tangent vector is based at a different point".into()));
        }
        Ok(BallPoint {
            coords: self.ball().exp_map(&self.coords, &v.coords),
            curvature: self.curvature,
        })
    }

    pub fn log_map(&self, y: &BallPoint) -> Result<TangentVector> {
        self.check(y)?;
        Ok(TangentVector {
            coords: self.ball().log_map(&self.coords, &y.coords),
            basepoint: self.clone(),
        })
    }

    pub fn scalar_mul(&self, r: f64) -> BallPoint {
        BallPoint {
            coords: self.ball().mobius_scalar_mul(r, &self.coords),
            curvature: self.curvature,
        }
    }
}

/// A vector in the tangent space at `basepoint`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
    basepoint: BallPoint,
}

impl TangentVector {
    pub fn new(coords: Vec<f64>, basepoint: BallPoint) -> Result<Self> {
        ensure_dim(basepoint.dim(), coords.len())?;
        Ok(TangentVector { coords, basepoint })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn basepoint(&self) -> &BallPoint {
        &self.basepoint
    }
}
