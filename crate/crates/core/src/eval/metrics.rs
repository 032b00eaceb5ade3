//! Ranking metrics and their per-seed aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `|top-K ∩ truth| / |truth|`; 0 for an empty truth set.
pub fn recall_at_k<T: PartialEq>(ranked: &[T], truth: &[T], k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let top = &ranked[..k.min(ranked.len())];
    truth.iter().filter(|t| top.contains(t)).count() as f64 / truth.len() as f64
}

/// `1 / log2(rank + 1)` for the single relevant item at 1-based `rank <= K`.
pub fn ndcg_at_k<T: PartialEq>(ranked: &[T], truth: &T, k: usize) -> f64 {
    ranked
        .iter()
        .take(k)
        .position(|r| r == truth)
        .map_or(0.0, |i| 1.0 / ((i + 2) as f64).log2())
}

/// Population mean and sample standard deviation (0 for fewer than two
/// values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Metric values for one token scheme across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub scheme: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Metric name to one value per seed.
    pub per_seed: BTreeMap<String, Vec<f64>>,
    pub mean: BTreeMap<String, f64>,
    /// Sample standard deviation across seeds.
    pub std: BTreeMap<String, f64>,
    /// Extra per-seed numbers that are not ranking metrics.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub diagnostics: BTreeMap<String, Vec<f64>>,
}

impl MetricsReport {
    pub fn new(scheme: impl Into<String>, config: serde_json::Value) -> Self {
        MetricsReport {
            scheme: scheme.into(),
            config,
            seeds: Vec::new(),
            per_seed: BTreeMap::new(),
            mean: BTreeMap::new(),
            std: BTreeMap::new(),
            diagnostics: BTreeMap::new(),
        }
    }

    /// Append one seed's metrics; every seed must report the same names.
    pub fn push(&mut self, seed: u64, metrics: &BTreeMap<String, f64>) -> Result<()> {
        if !self.seeds.is_empty() && metrics.keys().ne(self.per_seed.keys()) {
            return Err(Error::Usage("seeds report different metric names".into()));
        }
        for (name, v) in metrics {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Numeric(format!("metric {name} = {v} outside [0, 1]")));
            }
            self.per_seed.entry(name.clone()).or_default().push(*v);
        }
        self.seeds.push(seed);
        self.refresh();
        Ok(())
    }

    pub fn push_diagnostic(&mut self, name: &str, value: f64) {
        self.diagnostics.entry(name.to_string()).or_default().push(value);
    }

    fn refresh(&mut self) {
        for (name, values) in &self.per_seed {
            let (m, s) = mean_std(values);
            self.mean.insert(name.clone(), m);
            self.std.insert(name.clone(), s);
        }
    }

    pub fn mean_of(&self, metric: &str) -> f64 {
        self.mean.get(metric).copied().unwrap_or(f64::NAN)
    }
}
