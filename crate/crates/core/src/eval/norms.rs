//! Spread of latent norms, measured in the tangent space at the origin.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{norm, Flavor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub cv: f64,
}

/// Euclidean norms of the latents, after `log0` for hyperbolic ones.
pub fn latent_norms(latents: &[Vec<f64>], flavor: Flavor) -> Vec<f64> {
    latents
        .iter()
        .map(|x| match flavor.ball() {
            Some(ball) => norm(&ball.log0(x)),
            None => norm(x),
        })
        .collect()
}

/// Mean, population standard deviation and coefficient of variation of
/// the latent norms.
pub fn norm_analysis(latents: &[Vec<f64>], flavor: Flavor) -> Result<NormStats> {
    if latents.is_empty() {
        return Err(Error::Usage("norm analysis needs at least one latent".into()));
    }
    stats(&latent_norms(latents, flavor))
}

pub fn stats(norms: &[f64]) -> Result<NormStats> {
    let n = norms.len() as f64;
    let mean = norms.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::Numeric("coefficient of variation undefined for zero mean norm".into()));
    }
    let std = (norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    Ok(NormStats { mean, std, cv: std / mean })
}

/// `entity_id,norm` rows with a header.
pub fn write_norms_csv<W: Write, S: AsRef<str>>(mut out: W, ids: &[S], norms: &[f64]) -> std::io::Result<()> {
    writeln!(out, "entity_id,norm")?;
    for (id, v) in ids.iter().zip(norms) {
        writeln!(out, "{},{v}", id.as_ref())?;
    }
    Ok(())
}
