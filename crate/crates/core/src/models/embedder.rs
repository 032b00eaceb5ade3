//! Contrastive hierarchy embeddings with joint residual quantization.
//!
//! Each entity owns one row of an embedding table (Euclidean, or points on
//! the ball). For a hypernymy pair `(u, v)` the loss is
//!
//! ```text
//! -log( e^{-d(u,v)} / sum_{w in {v} + negatives + {u}} e^{-d(u,w)} ) + L_q(u) + L_q(v)
//! ```
//!
//! where `L_q` is the quantization loss of the entity's embedding and `d` is
//! the Euclidean or the Poincaré distance.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::{RelationSplit, TaxonomyGraph};
use crate::error::{Error, Result};
use crate::geometry::Flavor;
use crate::models::config::{EpochLog, TrainConfig};
use crate::models::vae::sample_rows;
use crate::nn::param::{Manifold, ParamId, ParamStore, Parameter};
use crate::nn::tape::{Tape, Var};
use crate::nn::{hyper, optim};
use crate::quantizer::{disambiguate, quantize_on_tape, Codebook, Multitoken};
use crate::seed::{rng_for, Rng};

/// Half-width of the uniform embedding initialization.
pub const INIT_SCALE: f64 = 1e-3;

const MASKED: f64 = -1e30;

/// `-log(e^{-d_pos} / (e^{-d_pos} + sum_j e^{-d_others[j]}))`.
///
/// `d_others` lists every non-positive member of the denominator, including
/// the anchor itself at distance 0.
pub fn contrastive_term(d_pos: f64, d_others: &[f64]) -> f64 {
    let logits: Vec<f64> = std::iter::once(-d_pos).chain(d_others.iter().map(|d| -d)).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse + d_pos
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchyEmbedder {
    pub config: TrainConfig,
    pub entities: Vec<String>,
    pub table: ParamId,
    pub levels: Vec<ParamId>,
    pub store: ParamStore,
}

impl HierarchyEmbedder {
    pub fn new(config: &TrainConfig, entities: Vec<String>) -> Result<Self> {
        config.validate()?;
        if entities.is_empty() {
            return Err(Error::Data("no entities to embed".into()));
        }
        let manifold = match config.flavor()? {
            Flavor::Euclidean => Manifold::Euclidean,
            Flavor::Hyperbolic { c } => Manifold::Ball { c },
        };
        let mut store = ParamStore::new();
        let mut rng = rng_for(config.seed, "embedder/init");
        let table = store.add(Parameter::uniform(
            "embeddings",
            entities.len(),
            config.h,
            INIT_SCALE,
            manifold,
            &mut rng,
        ));
        let levels = (0..config.k)
            .map(|i| store.add(Parameter::zeros(format!("codebook.{i}"), config.s, config.h, manifold)))
            .collect();
        Ok(HierarchyEmbedder {
            config: config.clone(),
            entities,
            table,
            levels,
            store,
        })
    }

    pub fn flavor(&self) -> Flavor {
        self.config.flavor().expect("validated at construction")
    }

    pub fn embedding(&self, entity: usize) -> &[f64] {
        self.store.get(self.table).row(entity)
    }

    pub fn embeddings(&self) -> Vec<Vec<f64>> {
        (0..self.entities.len()).map(|i| self.embedding(i).to_vec()).collect()
    }

    pub fn codebook(&self) -> Codebook {
        let levels = self.levels.iter().map(|&id| self.store.get(id).values.clone()).collect();
        Codebook::new(self.flavor(), self.config.s, self.config.h, levels).expect("codebook parameters are consistent")
    }

    pub fn distance(&self, a: usize, b: usize) -> f64 {
        self.flavor().distance(self.embedding(a), self.embedding(b))
    }

    /// Seed level `i` of the codebook with samples of the level-`i`
    /// residuals of the embeddings of `pool`.
    pub fn init_codebook(&mut self, pool: &[usize], rng: &mut Rng) -> Result<()> {
        let flavor = self.flavor();
        let h = self.config.h;
        let mut residuals: Vec<Vec<f64>> = pool.iter().map(|&i| self.embedding(i).to_vec()).collect();
        for &id in &self.levels.clone() {
            let picked = sample_rows(&residuals, self.config.s, rng);
            let level: Vec<f64> = picked.iter().flat_map(|&i| residuals[i].clone()).collect();
            self.store.get_mut(id).values = level.clone();
            residuals = residuals
                .iter()
                .map(|r| {
                    let (j, _) = crate::quantizer::nearest_codeword(&level, h, r, flavor)?;
                    let e = &level[j * h..(j + 1) * h];
                    Ok(match flavor.ball() {
                        Some(b) => b.mobius_sub(r, e),
                        None => r.iter().zip(e).map(|(a, b)| a - b).collect(),
                    })
                })
                .collect::<Result<_>>()?;
        }
        Ok(())
    }

    /// Record the batch loss for `rows`, each `(u, v, negatives)`. Returns
    /// the mean loss node and the summed softmax and quantization parts.
    fn record(&self, t: &mut Tape, rows: &[(usize, usize, Vec<usize>)]) -> Result<(Var, f64, f64, Vec<Vec<usize>>)> {
        let flavor = self.flavor();
        let b = rows.len();
        let width = rows.iter().map(|r| r.2.len()).max().unwrap_or(0) + 2;
        let mut anchor = Vec::with_capacity(b * width);
        let mut cand = Vec::with_capacity(b * width);
        let mut mask = Vec::with_capacity(b * width);
        for (u, v, negs) in rows {
            for j in 0..width {
                anchor.push(*u);
                let (w, m) = match j {
                    0 => (*v, 0.0),
                    _ if j <= negs.len() => (negs[j - 1], 0.0),
                    _ if j == negs.len() + 1 => (*u, 0.0),
                    _ => (*u, MASKED),
                };
                cand.push(w);
                mask.push(m);
            }
        }
        let table = t.param(&self.store, self.table);
        let ua = t.gather_rows(table, &anchor);
        let wa = t.gather_rows(table, &cand);
        let d = match flavor.ball() {
            Some(ball) => hyper::distance(t, &ball, ua, wa),
            None => hyper::euclidean_distance(t, ua, wa),
        };
        let d = t.reshape(d, b, width);
        let neg = t.neg(d);
        let mask = t.leaf(b, width, mask);
        let logits = t.add(neg, mask);
        let ce = t.cross_entropy(logits, &vec![0; b]);

        let ends: Vec<usize> = rows.iter().map(|r| r.0).chain(rows.iter().map(|r| r.1)).collect();
        let x = t.gather_rows(table, &ends);
        let levels: Vec<Var> = self.levels.iter().map(|&id| t.param(&self.store, id)).collect();
        let q = quantize_on_tape(t, &levels, flavor, self.config.loss_metric, self.config.alpha, x)?;
        let lq = t.affine(q.loss, 1.0 / b as f64, 0.0);
        let total = t.add(ce, lq);
        Ok((total, t.scalar(ce) * b as f64, t.scalar(q.loss), q.tokens))
    }

    /// Loss of one pair against explicit negatives; gradients are added to
    /// the parameter store.
    pub fn contrastive_loss(&mut self, u: usize, v: usize, negatives: &[usize]) -> Result<f64> {
        if negatives.is_empty() {
            return Err(Error::Usage("contrastive loss needs at least one negative".into()));
        }
        let n = self.entities.len();
        if u >= n || v >= n || negatives.iter().any(|&w| w >= n) {
            return Err(Error::Usage("entity index out of range".into()));
        }
        let mut t = Tape::new();
        let (loss, _, _, _) = self.record(&mut t, &[(u, v, negatives.to_vec())])?;
        t.backward_into(loss, &mut self.store)?;
        Ok(t.scalar(loss))
    }

    /// Multitokens for every entity, disambiguated.
    pub fn multitokens(&self) -> Result<BTreeMap<String, Multitoken>> {
        let codebook = self.codebook();
        let mut raw = BTreeMap::new();
        for (i, name) in self.entities.iter().enumerate() {
            raw.insert(name.clone(), Multitoken::new(codebook.encode(self.embedding(i))?));
        }
        Ok(disambiguate(&raw))
    }
}

/// Uniform negatives for anchor `u`: `m` distinct entities outside
/// `excluded` (or all of them when fewer are available).
pub fn sample_negatives(n: usize, excluded: &BTreeSet<usize>, m: usize, rng: &mut Rng) -> Vec<usize> {
    let available = n - excluded.len();
    if available <= m {
        return (0..n).filter(|i| !excluded.contains(i)).collect();
    }
    let mut picked = Vec::with_capacity(m);
    let mut seen = HashSet::with_capacity(m);
    while picked.len() < m {
        let w = rng.random_range(0..n);
        if !excluded.contains(&w) && seen.insert(w) {
            picked.push(w);
        }
    }
    picked
}

/// Train on the training relations of `split`. Negatives for `(u, v)` are
/// resampled for every pair occurrence and exclude `u`, `v` and every
/// entity related to `u` by a training edge in either direction.
pub fn train_hierarchy_embedder(
    graph: &TaxonomyGraph,
    split: &RelationSplit,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &HierarchyEmbedder),
) -> Result<(HierarchyEmbedder, Vec<EpochLog>)> {
    if graph.is_empty() {
        return Err(Error::Data("empty taxonomy".into()));
    }
    let mut model = HierarchyEmbedder::new(config, graph.entities().to_vec())?;
    let n = graph.len();
    let mut related: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();
    for &(p, c) in &split.train {
        related[p].insert(c);
        related[c].insert(p);
    }
    let mut rng = rng_for(config.seed, "embedder/order");
    let mut neg_rng = rng_for(config.seed, "embedder/negatives");
    let mut pairs = split.train.clone();
    pairs.shuffle(&mut rng);

    let mut pool: Vec<usize> = pairs
        .iter()
        .take(config.batch_size)
        .flat_map(|&(p, c)| [p, c])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if pool.len() < config.s {
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        pool = all.into_iter().take(config.batch_size.max(config.s).min(n)).collect();
    }
    model.init_codebook(&pool, &mut rng_for(config.seed, "embedder/codebook"))?;

    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        pairs.shuffle(&mut rng);
        let (mut task, mut quant) = (0.0, 0.0);
        let mut used = vec![vec![false; config.s]; config.k];
        for chunk in pairs.chunks(config.batch_size) {
            let rows: Vec<(usize, usize, Vec<usize>)> = chunk
                .iter()
                .map(|&(u, v)| (u, v, sample_negatives(n, &related[u], config.negatives, &mut neg_rng)))
                .collect();
            let mut t = Tape::new();
            let (loss, ce, lq, tokens) = model.record(&mut t, &rows)?;
            if !t.scalar(loss).is_finite() {
                return Err(Error::Numeric(format!("non-finite embedder loss at epoch {epoch}")));
            }
            t.backward_into(loss, &mut model.store)?;
            optim::step(&mut model.store, lr);
            task += ce;
            quant += lq;
            for ts in tokens {
                for (level, tk) in ts.into_iter().enumerate() {
                    used[level][tk] = true;
                }
            }
        }
        let m = pairs.len().max(1) as f64;
        let log = EpochLog {
            epoch,
            lr,
            task: task / m,
            quantization: quant / m,
            used_codewords: used.iter().map(|l| l.iter().filter(|&&u| u).count()).collect(),
        };
        on_epoch(&log, &model);
        logs.push(log);
    }
    Ok((model, logs))
}
