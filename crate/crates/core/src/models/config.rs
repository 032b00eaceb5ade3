//! Training configuration shared by the VAE and the hierarchy embedder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Curvature, Flavor};
use crate::quantizer::LossMetric;

/// Euclidean (RQ) or hyperbolic (HRQ) quantization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Rq,
    Hrq,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::Rq => "rq",
            Scheme::Hrq => "hrq",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rq" => Ok(Scheme::Rq),
            "hrq" => Ok(Scheme::Hrq),
            other => Err(Error::Config(format!("unknown scheme `{other}` (expected rq or hrq)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub flavor: Scheme,
    /// Curvature magnitude for the hyperbolic flavor.
    pub c: f64,
    /// Codebook depth.
    pub k: usize,
    /// Codewords per level.
    pub s: usize,
    /// Latent dimension.
    pub h: usize,
    /// Commitment weight.
    pub alpha: f64,
    pub lr: f64,
    pub warmup_lr: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// Negatives per positive pair (hierarchy embedder).
    pub negatives: usize,
    pub seed: u64,
    /// Hidden layer sizes of the VAE encoder; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub loss_metric: LossMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            flavor: Scheme::Hrq,
            c: 1.0,
            k: 3,
            s: 64,
            h: 8,
            alpha: 0.25,
            lr: 1.0,
            warmup_lr: 0.01,
            warmup_epochs: 2,
            epochs: 150,
            batch_size: 32,
            negatives: 50,
            seed: 0,
            hidden: vec![64, 32],
            loss_metric: LossMetric::Manifold,
        }
    }
}

impl TrainConfig {
    /// Field-level validation.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("`{field}` {why}")));
        if !(self.c.is_finite() && self.c > 0.0) {
            return bad("c", "must be positive");
        }
        for (name, v) in [("k", self.k), ("s", self.s), ("h", self.h), ("batch_size", self.batch_size)] {
            if v == 0 {
                return bad(name, "must be positive");
            }
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return bad("alpha", "must be non-negative");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", "must be positive");
        }
        if !(self.warmup_lr > 0.0 && self.warmup_lr.is_finite()) {
            return bad("warmup_lr", "must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden", "sizes must be positive");
        }
        Ok(())
    }

    pub fn flavor(&self) -> Result<Flavor> {
        Ok(match self.flavor {
            Scheme::Rq => Flavor::Euclidean,
            Scheme::Hrq => Flavor::Hyperbolic { c: Curvature::new(self.c)? },
        })
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        crate::nn::optim::warmup_lr(epoch, self.warmup_epochs, self.warmup_lr, self.lr)
    }

    /// Parse a JSON config; unknown fields are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Per-epoch training record, one JSON line each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean task loss per example (reconstruction or contrastive).
    pub task: f64,
    /// Mean quantization loss per example.
    pub quantization: f64,
    /// Codewords used at least once per level, on the last epoch's assignments.
    pub used_codewords: Vec<usize>,
}
