//! Residual quantization in Euclidean space (RQ) and on the Poincaré ball
//! (HRQ).
//!
//! Both flavors walk the codebook levels in order: pick the nearest codeword
//! to the current residual, emit its index, and move to the next residual
//! (`r - e` or `r (-) e`). The reconstruction is the plain sum of the chosen
//! codewords, or their Möbius left fold starting from the origin.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::geometry::{Curvature, Flavor, PoincareBall};
use crate::nn::hyper;
use crate::nn::tape::{Tape, Var};

/// `k` levels of `s` codewords of dimension `h`, stored row-major per level.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    flavor: Flavor,
    s: usize,
    h: usize,
    levels: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodebookJson {
    flavor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    curvature: Option<f64>,
    k: usize,
    s: usize,
    h: usize,
    levels: Vec<Vec<Vec<f64>>>,
}

impl Codebook {
    /// Build from flat per-level buffers of length `s * h`.
    pub fn new(flavor: Flavor, s: usize, h: usize, levels: Vec<Vec<f64>>) -> Result<Self> {
        if s == 0 || h == 0 || levels.is_empty() {
            return Err(Error::Config("codebook needs k, s, h > 0".into()));
        }
        for level in &levels {
            ensure_dim(s * h, level.len())?;
            if level.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite codeword".into()));
            }
            if let Some(ball) = flavor.ball() {
                if level.chunks(h).any(|w| !ball.contains(w)) {
                    return Err(Error::Data("hyperbolic codeword outside the ball".into()));
                }
            }
        }
        Ok(Codebook { flavor, s, h, levels })
    }

    pub fn flavor(&self) -> Flavor {
        self.flavor
    }

    pub fn k(&self) -> usize {
        self.levels.len()
    }

    pub fn s(&self) -> usize {
        self.s
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn level(&self, i: usize) -> &[f64] {
        &self.levels[i]
    }

    pub fn codeword(&self, level: usize, token: usize) -> &[f64] {
        &self.levels[level][token * self.h..(token + 1) * self.h]
    }

    /// Quantize with the codebook's own flavor.
    pub fn quantize(&self, x: &[f64]) -> Result<QuantizationResult> {
        ensure_dim(self.h, x.len())?;
        let mut residual = x.to_vec();
        let mut tokens = Vec::with_capacity(self.k());
        let mut codewords = Vec::with_capacity(self.k());
        let mut residuals = Vec::with_capacity(self.k());
        let ball = self.flavor.ball();
        if let Some(b) = &ball {
            if !b.contains(x) {
                return Err(Error::Data("hyperbolic quantizer input outside the ball".into()));
            }
        }
        for level in &self.levels {
            let (token, _) = nearest_codeword(level, self.h, &residual, self.flavor)?;
            let e = level[token * self.h..(token + 1) * self.h].to_vec();
            let next = match &ball {
                Some(b) => b.mobius_sub(&residual, &e),
                None => residual.iter().zip(&e).map(|(r, c)| r - c).collect(),
            };
            tokens.push(token);
            residuals.push(std::mem::replace(&mut residual, next));
            codewords.push(e);
        }
        let reconstruction = reconstruct(&codewords, self.flavor, self.h);
        Ok(QuantizationResult {
            multitoken: Multitoken::new(tokens),
            codewords,
            reconstruction,
            residuals,
        })
    }

    /// Tokens only.
    pub fn encode(&self, x: &[f64]) -> Result<Vec<usize>> {
        Ok(self.quantize(x)?.multitoken.tokens)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = CodebookJson {
            flavor: match self.flavor {
                Flavor::Euclidean => "euclidean".into(),
                Flavor::Hyperbolic { .. } => "hyperbolic".into(),
            },
            curvature: match self.flavor {
                Flavor::Euclidean => None,
                Flavor::Hyperbolic { c } => Some(c.value()),
            },
            k: self.k(),
            s: self.s,
            h: self.h,
            levels: self
                .levels
                .iter()
                .map(|l| l.chunks(self.h).map(<[f64]>::to_vec).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CodebookJson =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("codebook JSON: {e}")))?;
        let flavor = match (doc.flavor.as_str(), doc.curvature) {
            ("euclidean", None) => Flavor::Euclidean,
            ("hyperbolic", Some(c)) => Flavor::Hyperbolic { c: Curvature::new(c)? },
            (f, _) => return Err(Error::Data(format!("codebook flavor `{f}` with curvature {:?}", doc.curvature))),
        };
        ensure_dim(doc.k, doc.levels.len())?;
        let mut levels = Vec::with_capacity(doc.k);
        for level in doc.levels {
            ensure_dim(doc.s, level.len())?;
            let mut flat = Vec::with_capacity(doc.s * doc.h);
            for w in level {
                ensure_dim(doc.h, w.len())?;
                flat.extend(w);
            }
            levels.push(flat);
        }
        Codebook::new(flavor, doc.s, doc.h, levels)
    }
}

/// Nearest codeword in one level: `(token, distance)`, ties going to the
/// lowest index.
pub fn nearest_codeword(level: &[f64], h: usize, query: &[f64], flavor: Flavor) -> Result<(usize, f64)> {
    if level.is_empty() {
        return Err(Error::Usage("nearest_codeword on an empty level".into()));
    }
    ensure_dim(h, query.len())?;
    let mut best = (0, f64::INFINITY);
    for (j, w) in level.chunks(h).enumerate() {
        let d = flavor.distance(query, w);
        if d < best.1 {
            best = (j, d);
        }
    }
    Ok(best)
}

/// Sum of codewords, or their Möbius left fold from the origin.
pub fn reconstruct(codewords: &[Vec<f64>], flavor: Flavor, h: usize) -> Vec<f64> {
    let mut y = vec![0.0; h];
    for e in codewords {
        y = match flavor.ball() {
            Some(b) => b.mobius_add(&y, e),
            None => y.iter().zip(e).map(|(a, b)| a + b).collect(),
        };
    }
    y
}

/// Euclidean residual quantization; errors on a hyperbolic codebook.
pub fn rq_quantize(codebook: &Codebook, x: &[f64]) -> Result<QuantizationResult> {
    if codebook.flavor().is_hyperbolic() {
        return Err(Error::Usage("rq_quantize needs a Euclidean codebook".into()));
    }
    codebook.quantize(x)
}

/// Hyperbolic residual quantization; `x` must use the codebook's curvature.
pub fn hrq_quantize(codebook: &Codebook, x: &crate::geometry::BallPoint) -> Result<QuantizationResult> {
    match codebook.flavor() {
        Flavor::Hyperbolic { c } if c == x.curvature() => codebook.quantize(x.coords()),
        Flavor::Hyperbolic { c } => Err(Error::CurvatureMismatch {
            left: c.value(),
            right: x.curvature().value(),
        }),
        Flavor::Euclidean => Err(Error::Usage("hrq_quantize needs a hyperbolic codebook".into())),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Multitoken {
    pub tokens: Vec<usize>,
    pub disambiguator: Option<usize>,
}

impl Multitoken {
    pub fn new(tokens: Vec<usize>) -> Self {
        Multitoken {
            tokens,
            disambiguator: None,
        }
    }

    pub fn with_disambiguator(tokens: Vec<usize>, d: usize) -> Self {
        Multitoken {
            tokens,
            disambiguator: Some(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationResult {
    pub multitoken: Multitoken,
    /// Chosen codeword per level.
    pub codewords: Vec<Vec<f64>>,
    pub reconstruction: Vec<f64>,
    /// Residual entering each level; `residuals[0]` is the input.
    pub residuals: Vec<Vec<f64>>,
}

/// Which squared distance the quantization loss uses on the ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMetric {
    /// Squared geodesic distance for hyperbolic codebooks.
    #[default]
    Manifold,
    /// Squared Euclidean norm regardless of flavor.
    Euclidean,
}

fn sq_dist(flavor: Flavor, metric: LossMetric, a: &[f64], b: &[f64]) -> f64 {
    match (flavor.ball(), metric) {
        (Some(ball), LossMetric::Manifold) => ball.distance(a, b).powi(2),
        _ => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

/// Value of the quantization loss `sum_i (|sg[r_i] - e_i|^2 + alpha |r_i - sg[e_i]|^2)`.
///
/// Gradients come from [`quantize_on_tape`]; this is the value-only form.
pub fn quantization_loss(
    residuals: &[Vec<f64>],
    codewords: &[Vec<f64>],
    alpha: f64,
    flavor: Flavor,
    metric: LossMetric,
) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    ensure_dim(residuals.len(), codewords.len())?;
    Ok(residuals
        .iter()
        .zip(codewords)
        .map(|(r, e)| (1.0 + alpha) * sq_dist(flavor, metric, r, e))
        .sum())
}

/// Result of quantizing a batch on a tape.
#[derive(Debug, Clone)]
pub struct TapeQuantization {
    /// Tokens per batch row.
    pub tokens: Vec<Vec<usize>>,
    /// Straight-through output: forward value of the reconstruction,
    /// gradient routed to the encoder output.
    pub output: Var,
    /// Reconstruction node itself (no straight-through).
    pub reconstruction: Var,
    /// Quantization loss summed over levels and batch rows.
    pub loss: Var,
    /// Residual entering each level.
    pub residuals: Vec<Var>,
    /// Chosen codewords per level.
    pub codewords: Vec<Var>,
}

/// Quantize the rows of `x` against codebook level nodes `levels` (each
/// `s x h`), recording the quantization loss and the straight-through
/// reconstruction. Token selection happens on forward values and carries no
/// gradient.
pub fn quantize_on_tape(
    t: &mut Tape,
    levels: &[Var],
    flavor: Flavor,
    metric: LossMetric,
    alpha: f64,
    x: Var,
) -> Result<TapeQuantization> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be non-negative, got {alpha}")));
    }
    let (batch, h) = t.shape(x);
    let ball = flavor.ball();
    let mut tokens = vec![Vec::with_capacity(levels.len()); batch];
    let mut residual = x;
    let mut recon: Option<Var> = None;
    let mut terms = Vec::with_capacity(levels.len());
    let mut residuals = Vec::with_capacity(levels.len());
    let mut codewords = Vec::with_capacity(levels.len());
    for &level in levels {
        ensure_dim(h, t.shape(level).1)?;
        let chosen: Vec<usize> = {
            let lv = t.value(level);
            t.value(residual)
                .chunks(h)
                .map(|r| nearest_codeword(lv, h, r, flavor).map(|(j, _)| j))
                .collect::<Result<_>>()?
        };
        for (row, &j) in tokens.iter_mut().zip(&chosen) {
            row.push(j);
        }
        let e = t.gather_rows(level, &chosen);
        let r_sg = t.stop_grad(residual);
        let e_sg = t.stop_grad(e);
        let (pull, commit) = match (&ball, metric) {
            (Some(b), LossMetric::Manifold) => (
                hyper::sq_distance(t, b, r_sg, e),
                hyper::sq_distance(t, b, residual, e_sg),
            ),
            _ => (
                hyper::euclidean_sq_distance(t, r_sg, e),
                hyper::euclidean_sq_distance(t, residual, e_sg),
            ),
        };
        let commit = t.affine(commit, alpha, 0.0);
        let term = t.add(pull, commit);
        terms.push(t.sum(term));
        residuals.push(residual);
        codewords.push(e);
        let next = match &ball {
            Some(b) => hyper::mobius_sub(t, b, residual, e),
            None => t.sub(residual, e),
        };
        residual = next;
        recon = Some(match (recon, &ball) {
            (None, Some(b)) => {
                // origin (+) e
                let zero = t.leaf(batch, h, vec![0.0; batch * h]);
                hyper::mobius_add(t, b, zero, e)
            }
            (None, None) => e,
            (Some(y), Some(b)) => hyper::mobius_add(t, b, y, e),
            (Some(y), None) => t.add(y, e),
        });
    }
    let reconstruction = recon.ok_or_else(|| Error::Config("codebook has no levels".into()))?;
    let output = t.straight_through(x, reconstruction);
    let loss = t.add_all(&terms);
    Ok(TapeQuantization {
        tokens,
        output,
        reconstruction,
        loss,
        residuals,
        codewords,
    })
}

/// Assign disambiguators: entities sharing base tokens get 0, 1, 2, ... in
/// ascending identifier order; unique ones get 0. Existing disambiguators
/// are ignored, so applying this twice changes nothing.
pub fn disambiguate(assignments: &BTreeMap<String, Multitoken>) -> BTreeMap<String, Multitoken> {
    let mut seen: BTreeMap<&[usize], usize> = BTreeMap::new();
    assignments
        .iter()
        .map(|(id, mt)| {
            let n = seen.entry(&mt.tokens).or_insert(0);
            let out = Multitoken::with_disambiguator(mt.tokens.clone(), *n);
            *n += 1;
            (id.clone(), out)
        })
        .collect()
}

/// Write `entity_id, t_0..t_{k-1}, disambiguator` rows with a header.
pub fn write_multitokens<W: Write>(mut out: W, k: usize, tokens: &BTreeMap<String, Multitoken>) -> std::io::Result<()> {
    let mut header = vec!["entity_id".to_string()];
    header.extend((0..k).map(|i| format!("t_{i}")));
    header.push("disambiguator".into());
    writeln!(out, "{}", header.join("\t"))?;
    for (id, mt) in tokens {
        let mut row = vec![id.clone()];
        row.extend(mt.tokens.iter().map(usize::to_string));
        row.push(mt.disambiguator.unwrap_or(0).to_string());
        writeln!(out, "{}", row.join("\t"))?;
    }
    Ok(())
}

/// Parse a multitoken TSV written by [`write_multitokens`]; returns `k`
/// (from the header) and the assignments.
pub fn read_multitokens(path: &Path) -> Result<(usize, BTreeMap<String, Multitoken>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(Error::Data(format!("{}: empty multitoken file", path.display()))),
    };
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 3 || cols[0] != "entity_id" || cols[cols.len() - 1] != "disambiguator" {
        return Err(Error::Data(format!("{}: bad multitoken header", path.display())));
    }
    let k = cols.len() - 2;
    let mut map = BTreeMap::new();
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Data(format!("{}:{}: malformed multitoken row", path.display(), n + 2));
        if f.len() != k + 2 {
            return Err(bad());
        }
        let tokens = f[1..=k].iter().map(|x| x.parse().map_err(|_| bad())).collect::<Result<Vec<usize>>>()?;
        let d = f[k + 1].parse().map_err(|_| bad())?;
        map.insert(f[0].to_string(), Multitoken::with_disambiguator(tokens, d));
    }
    Ok((k, map))
}

/// Per-level count of how many inputs picked each codeword.
pub fn codeword_usage(codebook: &Codebook, tokens: impl IntoIterator<Item = Vec<usize>>) -> Vec<Vec<usize>> {
    let mut usage = vec![vec![0; codebook.s()]; codebook.k()];
    for ts in tokens {
        for (level, t) in ts.into_iter().enumerate() {
            usage[level][t] += 1;
        }
    }
    usage
}

/// Ball for a hyperbolic flavor or an error naming `what`.
pub fn require_ball(flavor: Flavor, what: &str) -> Result<PoincareBall> {
    flavor
        .ball()
        .ok_or_else(|| Error::Usage(format!("{what} needs a hyperbolic flavor")))
}
