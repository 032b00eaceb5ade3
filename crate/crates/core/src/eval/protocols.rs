//! End-to-end evaluation protocols: hypernym generation over a taxonomy
//! and next-item generation over interaction histories.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{leave_one_out, split_relations, InteractionDataset, LeaveOneOut, RelationSplit, TaxonomyGraph};
use crate::error::{Error, Result};
use crate::eval::baseline::random_baseline_tokens;
use crate::eval::layout::TokenLayout;
use crate::eval::metrics::{ndcg_at_k, recall_at_k, MetricsReport};
use crate::eval::norms::norm_analysis;
use crate::eval::probe::{ProbeConfig, ProbePair, ProbeTrainer, SequenceProbe};
use crate::models::{train_hierarchy_embedder, train_vae, Scheme, TrainConfig};
use crate::quantizer::{disambiguate, Multitoken};

/// Run `f` over `items` on at most `jobs` threads, keeping input order.
pub fn run_jobs<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    if jobs <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect())
}

fn token_map<'a>(tokens: &'a BTreeMap<String, Multitoken>, names: &[String]) -> Result<Vec<&'a Multitoken>> {
    names
        .iter()
        .map(|n| {
            tokens
                .get(n)
                .ok_or_else(|| Error::Data(format!("no multitoken for entity `{n}`")))
        })
        .collect()
}

fn check_scheme(tokens: &BTreeMap<String, Multitoken>, k: usize, s: usize) -> Result<()> {
    for (id, mt) in tokens {
        if mt.tokens.len() != k || mt.tokens.iter().any(|&t| t >= s) {
            return Err(Error::Config(format!(
                "multitoken of `{id}` does not fit the configured scheme (k = {k}, s = {s})"
            )));
        }
    }
    Ok(())
}

// ---- hierarchy modeling ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelingConfig {
    /// Embedder and quantizer settings; `flavor` is set per scheme.
    pub quantizer: TrainConfig,
    pub probe: ProbeConfig,
    pub test_fraction: f64,
}

impl Default for ModelingConfig {
    fn default() -> Self {
        ModelingConfig {
            quantizer: TrainConfig {
                batch_size: 10,
                epochs: 100,
                ..TrainConfig::default()
            },
            probe: ProbeConfig {
                epochs: 20,
                ..ProbeConfig::desk()
            },
            test_fraction: 0.15,
        }
    }
}

/// Probe metrics for fixed multitokens on one relation split. Training
/// pairs map a hyponym's multitoken to each of its training hypernyms;
/// a test query's truth set is all of its test hypernyms.
pub fn evaluate_modeling(
    graph: &TaxonomyGraph,
    split: &RelationSplit,
    tokens: &BTreeMap<String, Multitoken>,
    k: usize,
    s: usize,
    probe: ProbeConfig,
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    check_scheme(tokens, k, s)?;
    let mts = token_map(tokens, graph.entities())?;
    let layout = TokenLayout::for_tokens(k, s, mts.iter().copied())?;
    let pairs: Vec<ProbePair> = split
        .train
        .iter()
        .map(|&(hyper, hypo)| ProbePair {
            source: vec![mts[hypo].clone()],
            target: mts[hyper].clone(),
        })
        .collect();
    let mut trainer = ProbeTrainer::new(&pairs, layout, probe, seed)?;
    for _ in 0..probe.epochs {
        trainer.epoch()?;
    }
    let model = trainer.into_probe();
    let truths = RelationSplit::hypernyms_of(&split.test);
    if truths.is_empty() {
        return Err(Error::Data("test split has no relations".into()));
    }
    let mut sums = [0.0; 2];
    for (&query, hypers) in &truths {
        let truth: Vec<Multitoken> = hypers.iter().map(|&h| mts[h].clone()).collect();
        let ranked = model.generate_multitokens(&[mts[query].clone()], 10)?;
        sums[0] += recall_at_k(&ranked, &truth, 5);
        sums[1] += recall_at_k(&ranked, &truth, 10);
    }
    let n = truths.len() as f64;
    Ok(BTreeMap::from([
        ("recall@5".to_string(), sums[0] / n),
        ("recall@10".to_string(), sums[1] / n),
    ]))
}

/// Multitokens from a hierarchy embedder trained on the training split.
pub fn modeling_tokens(graph: &TaxonomyGraph, split: &RelationSplit, config: &TrainConfig) -> Result<BTreeMap<String, Multitoken>> {
    let (model, _) = train_hierarchy_embedder(graph, split, config, |_, _| {})?;
    model.multitokens()
}

/// Full pipeline per scheme and seed: split, embed and quantize, freeze
/// tokens, train the probe, score held-out hypernyms. The split and all
/// training randomness derive from the seed; both schemes see the same
/// split and the same probe architecture.
pub fn run_hierarchy_modeling(
    graph: &TaxonomyGraph,
    schemes: &[Scheme],
    config: &ModelingConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<MetricsReport>> {
    let closed = if graph.is_closed() { graph.clone() } else { graph.transitive_closure()? };
    let cells: Vec<(Scheme, u64)> = schemes.iter().flat_map(|&sc| seeds.iter().map(move |&sd| (sc, sd))).collect();
    let results = run_jobs(&cells, jobs, |&(scheme, seed)| {
        let split = split_relations(&closed, config.test_fraction, seed)?;
        let qc = TrainConfig {
            flavor: scheme,
            seed,
            ..config.quantizer.clone()
        };
        let tokens = modeling_tokens(&closed, &split, &qc)?;
        log::info!("modeling {} seed {seed}: tokens ready", scheme.name());
        let m = evaluate_modeling(&closed, &split, &tokens, qc.k, qc.s, config.probe, seed)?;
        log::info!("modeling {} seed {seed}: {m:?}", scheme.name());
        Ok(m)
    })?;
    let cfg_json = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut reports: Vec<MetricsReport> = schemes
        .iter()
        .map(|s| MetricsReport::new(s.name(), cfg_json.clone()))
        .collect();
    for ((scheme, seed), m) in cells.iter().zip(&results) {
        let i = schemes.iter().position(|s| s == scheme).expect("scheme");
        reports[i].push(*seed, m)?;
    }
    Ok(reports)
}

// ---- hierarchy discovery ----

/// Token schemes compared in the discovery protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryScheme {
    Random,
    Rq,
    Hrq,
}

impl DiscoveryScheme {
    pub fn name(self) -> &'static str {
        match self {
            DiscoveryScheme::Random => "random",
            DiscoveryScheme::Rq => "rq",
            DiscoveryScheme::Hrq => "hrq",
        }
    }
}

impl std::str::FromStr for DiscoveryScheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(DiscoveryScheme::Random),
            "rq" => Ok(DiscoveryScheme::Rq),
            "hrq" => Ok(DiscoveryScheme::Hrq),
            other => Err(Error::Config(format!("unknown scheme `{other}` (expected random, rq or hrq)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoveryConfig {
    /// VAE settings; `flavor` is set per scheme.
    pub quantizer: TrainConfig,
    pub probe: ProbeConfig,
    /// Most recent history items fed to the probe.
    pub context: usize,
    /// Users whose validation target drives checkpoint selection; 0 means
    /// all of them.
    pub validation_users: usize,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            quantizer: TrainConfig {
                s: 16,
                lr: 0.05,
                warmup_lr: 0.005,
                warmup_epochs: 5,
                epochs: 100,
                batch_size: 32,
                ..TrainConfig::default()
            },
            probe: ProbeConfig {
                epochs: 2,
                ..ProbeConfig::desk()
            },
            context: 3,
            validation_users: 200,
        }
    }
}

/// Metrics of one discovery run plus non-metric diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryRun {
    pub metrics: BTreeMap<String, f64>,
    /// Share of top-10 predictions that name an existing item.
    pub valid_item_rate: f64,
    pub best_epoch: usize,
    /// CV of latent norms for learned schemes.
    pub latent_cv: Option<f64>,
}

fn window(items: &[usize], context: usize) -> &[usize] {
    &items[items.len().saturating_sub(context)..]
}

/// Training pairs: every item of a training history after the first,
/// predicted from up to `context` preceding items.
pub fn discovery_pairs(split: &LeaveOneOut, mts: &[&Multitoken], context: usize) -> Vec<ProbePair> {
    let mut pairs = Vec::new();
    for u in &split.users {
        for i in 1..u.train.len() {
            pairs.push(ProbePair {
                source: window(&u.train[..i], context).iter().map(|&j| mts[j].clone()).collect(),
                target: mts[u.train[i]].clone(),
            });
        }
    }
    pairs
}

struct Scores {
    metrics: BTreeMap<String, f64>,
    valid_rate: f64,
}

fn score(probe: &SequenceProbe, queries: &[(Vec<Multitoken>, Multitoken)], items: &BTreeSet<&Multitoken>) -> Result<Scores> {
    let mut sums = [0.0; 4];
    let mut valid = 0usize;
    for (source, truth) in queries {
        let ranked = probe.generate_multitokens(source, 10)?;
        valid += ranked.iter().filter(|m| items.contains(m)).count();
        let truth1 = std::slice::from_ref(truth);
        sums[0] += recall_at_k(&ranked, truth1, 5);
        sums[1] += recall_at_k(&ranked, truth1, 10);
        sums[2] += ndcg_at_k(&ranked, truth, 5);
        sums[3] += ndcg_at_k(&ranked, truth, 10);
    }
    let n = queries.len().max(1) as f64;
    let names = ["recall@5", "recall@10", "ndcg@5", "ndcg@10"];
    Ok(Scores {
        metrics: names.iter().zip(sums).map(|(k, v)| (k.to_string(), v / n)).collect(),
        valid_rate: valid as f64 / (10.0 * n),
    })
}

/// Train the sequential probe on fixed item multitokens, keep the epoch
/// with the best validation recall@10 and report its test metrics.
pub fn evaluate_discovery(
    dataset: &InteractionDataset,
    split: &LeaveOneOut,
    tokens: &BTreeMap<String, Multitoken>,
    k: usize,
    s: usize,
    config: &DiscoveryConfig,
    seed: u64,
) -> Result<(BTreeMap<String, f64>, f64, usize)> {
    check_scheme(tokens, k, s)?;
    if config.context == 0 {
        return Err(Error::Config("`context` must be positive".into()));
    }
    let mts = token_map(tokens, &dataset.items)?;
    let layout = TokenLayout::for_tokens(k, s, mts.iter().copied())?;
    let items: BTreeSet<&Multitoken> = mts.iter().copied().collect();
    let pairs = discovery_pairs(split, &mts, config.context);
    let seq = |ctx: &[usize]| window(ctx, config.context).iter().map(|&j| mts[j].clone()).collect::<Vec<_>>();
    let n_valid = if config.validation_users == 0 {
        split.users.len()
    } else {
        config.validation_users.min(split.users.len())
    };
    let valid: Vec<(Vec<Multitoken>, Multitoken)> = split.users[..n_valid]
        .iter()
        .map(|u| (seq(u.valid_context()), mts[u.valid].clone()))
        .collect();
    let test: Vec<(Vec<Multitoken>, Multitoken)> = split
        .users
        .iter()
        .map(|u| (seq(&u.test_context()), mts[u.test].clone()))
        .collect();

    let mut trainer = ProbeTrainer::new(&pairs, layout, config.probe, seed)?;
    let mut best: Option<(f64, usize, SequenceProbe)> = None;
    for epoch in 0..config.probe.epochs {
        let loss = trainer.epoch()?;
        let r = score(trainer.probe(), &valid, &items)?.metrics["recall@10"];
        log::debug!("probe epoch {epoch}: loss {loss:.4} valid recall@10 {r:.4}");
        if best.as_ref().is_none_or(|b| r > b.0) {
            best = Some((r, epoch, trainer.probe().clone()));
        }
    }
    let (_, epoch, probe) = best.ok_or_else(|| Error::Config("probe needs at least one epoch".into()))?;
    let scores = score(&probe, &test, &items)?;
    Ok((scores.metrics, scores.valid_rate, epoch))
}

/// Item multitokens and latent-norm CV from a VAE of `config.flavor`.
pub fn discovery_tokens(dataset: &InteractionDataset, config: &TrainConfig) -> Result<(BTreeMap<String, Multitoken>, f64)> {
    let (vae, _) = train_vae(&dataset.vectors, config, |_| {})?;
    let xs: Vec<&[f64]> = dataset.vectors.iter().map(Vec::as_slice).collect();
    let latents = vae.encode_latents(&xs)?;
    let cv = norm_analysis(&latents, vae.flavor())?.cv;
    let raw = dataset
        .items
        .iter()
        .cloned()
        .zip(vae.tokens(&xs)?.into_iter().map(Multitoken::new))
        .collect();
    Ok((disambiguate(&raw), cv))
}

/// One scheme and seed of the discovery protocol.
pub fn discovery_run(dataset: &InteractionDataset, scheme: DiscoveryScheme, config: &DiscoveryConfig, seed: u64) -> Result<DiscoveryRun> {
    let split = leave_one_out(dataset)?;
    let q = &config.quantizer;
    let (tokens, latent_cv) = match scheme {
        DiscoveryScheme::Random => (random_baseline_tokens(&dataset.items, q.k, q.s, seed), None),
        DiscoveryScheme::Rq | DiscoveryScheme::Hrq => {
            let flavor = if scheme == DiscoveryScheme::Rq { Scheme::Rq } else { Scheme::Hrq };
            let qc = TrainConfig {
                flavor,
                seed,
                ..q.clone()
            };
            let (t, cv) = discovery_tokens(dataset, &qc)?;
            (t, Some(cv))
        }
    };
    let (metrics, valid_item_rate, best_epoch) = evaluate_discovery(dataset, &split, &tokens, q.k, q.s, config, seed)?;
    log::info!("discovery {} seed {seed}: {metrics:?}", scheme.name());
    Ok(DiscoveryRun {
        metrics,
        valid_item_rate,
        best_epoch,
        latent_cv,
    })
}

/// Every scheme over every seed, aggregated into one report per scheme.
/// Reports carry `valid_item_rate`, `best_epoch` and, for learned
/// schemes, `latent_cv` as per-seed diagnostics.
pub fn run_hierarchy_discovery(
    dataset: &InteractionDataset,
    schemes: &[DiscoveryScheme],
    config: &DiscoveryConfig,
    seeds: &[u64],
    jobs: usize,
) -> Result<Vec<MetricsReport>> {
    let cells: Vec<(DiscoveryScheme, u64)> = schemes.iter().flat_map(|&sc| seeds.iter().map(move |&sd| (sc, sd))).collect();
    let runs = run_jobs(&cells, jobs, |&(scheme, seed)| discovery_run(dataset, scheme, config, seed))?;
    let cfg_json = serde_json::to_value(config).map_err(|e| Error::Config(e.to_string()))?;
    let mut reports: Vec<MetricsReport> = schemes
        .iter()
        .map(|s| MetricsReport::new(s.name(), cfg_json.clone()))
        .collect();
    for ((scheme, seed), run) in cells.iter().zip(&runs) {
        let r = &mut reports[schemes.iter().position(|s| s == scheme).expect("scheme")];
        r.push(*seed, &run.metrics)?;
        r.push_diagnostic("valid_item_rate", run.valid_item_rate);
        r.push_diagnostic("best_epoch", run.best_epoch as f64);
        if let Some(cv) = run.latent_cv {
            r.push_diagnostic("latent_cv", cv);
        }
    }
    Ok(reports)
}
