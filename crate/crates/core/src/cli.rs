//! The `hrq` command line: data synthesis, training, encoding, evaluation
//! and norm analysis, each run leaving a manifest next to its outputs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    leave_one_out, load_embeddings, load_interactions, load_taxonomy, split_relations, synth_interactions, synth_tree,
    RelationSplit, SynthInteractions, TaxonomyGraph,
};
use crate::error::{Error, Result};
use crate::eval::protocols::{evaluate_discovery, evaluate_modeling, run_jobs};
use crate::eval::{
    latent_norms, norms, run_hierarchy_discovery, run_hierarchy_modeling, write_norms_csv, DiscoveryConfig, DiscoveryScheme,
    MetricsReport, ModelingConfig,
};
use crate::geometry::Flavor;
use crate::models::{train_hierarchy_embedder, train_vae, HierarchyEmbedder, Scheme, TrainConfig, Vae};
use crate::quantizer::{disambiguate, read_multitokens, write_multitokens, Codebook, Multitoken};

#[derive(Debug, Parser)]
#[command(name = "hrq", version, about = "Hyperbolic and Euclidean residual quantization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic taxonomy or interaction dataset.
    SynthData(SynthArgs),
    /// Train a VAE quantizer on item vectors or a hierarchy embedder on a
    /// taxonomy.
    TrainQuantizer(TrainArgs),
    /// Quantize vectors with a trained model into a multitoken TSV.
    Encode(EncodeArgs),
    /// Hypernym generation probe over a taxonomy.
    EvalModeling(EvalModelingArgs),
    /// Next-item generation probe over interaction histories.
    EvalDiscovery(EvalDiscoveryArgs),
    /// Latent norm statistics of a trained model.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    Taxonomy,
    Interactions,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 4)]
    pub branching: usize,
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    /// Number of users (interactions only).
    #[arg(long, default_value_t = 2000)]
    pub users: usize,
    /// Held-out share of relations (taxonomy only).
    #[arg(long, default_value_t = 0.15)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training flags that override the config file.
#[derive(Debug, Args, Default)]
pub struct TrainOverrides {
    #[arg(long)]
    pub scheme: Option<Scheme>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub s: Option<usize>,
    #[arg(long)]
    pub h: Option<usize>,
    #[arg(long)]
    pub c: Option<f64>,
}

impl TrainOverrides {
    fn apply(&self, cfg: &mut TrainConfig) {
        macro_rules! set {
            ($($f:ident => $g:ident),*) => {$(if let Some(v) = self.$f { cfg.$g = v; })*};
        }
        set!(scheme => flavor, seed => seed, epochs => epochs, lr => lr, batch_size => batch_size, k => k, s => s, h => h, c => c);
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON training config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Item vectors as `{item_id, vector}` JSON lines (trains a VAE).
    #[arg(long, conflicts_with = "taxonomy", required_unless_present = "taxonomy")]
    pub embeddings: Option<PathBuf>,
    /// `hyponym<TAB>hypernym` pairs (trains a hierarchy embedder).
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Training relations; without it the taxonomy is split by seed.
    #[arg(long, requires = "taxonomy")]
    pub train_split: Option<PathBuf>,
    #[arg(long, default_value_t = 0.15)]
    pub test_fraction: f64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: TrainOverrides,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub codebook: PathBuf,
    /// `{item_id, vector}` JSON lines: raw inputs for a VAE, ball points
    /// for a hierarchy embedder.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Flags shared by both evaluation commands.
#[derive(Debug, Args)]
pub struct EvalCommon {
    /// JSON protocol config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Number of seeds, run as seeds 0..N.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Worker threads for independent (scheme, seed) runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Probe epochs.
    #[arg(long)]
    pub probe_epochs: Option<usize>,
    /// Quantizer training epochs (full protocol only).
    #[arg(long)]
    pub quantizer_epochs: Option<usize>,
    /// Metrics JSON destination.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalModelingArgs {
    #[arg(long)]
    pub taxonomy: PathBuf,
    /// Fixed multitokens. Without them the full protocol trains RQ and HRQ
    /// embedders per seed.
    #[arg(long, requires_all = ["train_split", "test_split"])]
    pub tokens: Option<PathBuf>,
    #[arg(long)]
    pub train_split: Option<PathBuf>,
    #[arg(long)]
    pub test_split: Option<PathBuf>,
    /// Scheme label written into the report for fixed tokens.
    #[arg(long, default_value = "tokens")]
    pub name: String,
    #[command(flatten)]
    pub common: EvalCommon,
}

#[derive(Debug, Args)]
pub struct EvalDiscoveryArgs {
    #[arg(long)]
    pub histories: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Fixed item multitokens. Without them the full protocol compares
    /// random, RQ and HRQ tokens per seed.
    #[arg(long)]
    pub tokens: Option<PathBuf>,
    #[arg(long, default_value = "tokens")]
    pub name: String,
    #[command(flatten)]
    pub common: EvalCommon,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    /// Directory for `norms.csv` and `norms.json`.
    #[arg(long)]
    pub out: PathBuf,
}

/// A trained model as stored in `checkpoint.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum Checkpoint {
    Vae(Vae),
    Embedder(HierarchyEmbedder),
}

impl Checkpoint {
    fn flavor(&self) -> Flavor {
        match self {
            Checkpoint::Vae(m) => m.flavor(),
            Checkpoint::Embedder(m) => m.flavor(),
        }
    }

    /// Pre-quantization latents of `xs`.
    fn latents(&self, xs: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match self {
            Checkpoint::Vae(m) => {
                let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
                if refs.is_empty() {
                    return Ok(Vec::new());
                }
                m.encode_latents(&refs)
            }
            Checkpoint::Embedder(m) => {
                let h = m.config.h;
                for x in xs {
                    crate::error::ensure_dim(h, x.len())?;
                }
                Ok(xs.to_vec())
            }
        }
    }
}

/// Record of one command run, written last and atomically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    /// Input path to SHA-256 hex digest.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub wall_clock_seconds: f64,
    pub version: String,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Write through a temporary sibling and rename into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| Error::Numeric(format!("cannot serialize: {e}")))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_data_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

struct Run {
    command: &'static str,
    start: Instant,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str) -> Self {
        Run {
            command,
            start: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn write(&mut self, path: PathBuf, bytes: &[u8]) -> Result<()> {
        write_atomic(&path, bytes)?;
        self.outputs.push(path);
        Ok(())
    }

    fn finish(self, manifest_path: &Path, config: serde_json::Value, seed: Option<u64>) -> Result<()> {
        let inputs = self
            .inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), sha256_file(p)?)))
            .collect::<Result<_>>()?;
        let m = RunManifest {
            command: self.command.to_string(),
            config,
            seed,
            inputs,
            outputs: self.outputs.iter().map(|p| p.display().to_string()).collect(),
            wall_clock_seconds: self.start.elapsed().as_secs_f64(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        };
        write_atomic(manifest_path, to_json(&m)?.as_bytes())
    }
}

fn tsv_bytes(k: usize, tokens: &BTreeMap<String, Multitoken>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_multitokens(&mut buf, k, tokens).expect("writing to memory");
    buf
}

/// Parse arguments, run the command and return the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData(a) => cmd_synth(&a),
        Command::TrainQuantizer(a) => cmd_train_quantizer(&a),
        Command::Encode(a) => cmd_encode(&a),
        Command::EvalModeling(a) => cmd_eval_modeling(&a),
        Command::EvalDiscovery(a) => cmd_eval_discovery(&a),
        Command::Analyze(a) => cmd_analyze(&a),
    }
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    create_dir(&a.out)?;
    let mut run = Run::new("synth-data");
    let tree = synth_tree(a.branching, a.depth, a.seed)?;
    let config;
    match a.kind {
        SynthKind::Taxonomy => {
            let split = split_relations(&tree, a.test_fraction, a.seed)?;
            let mut buf = Vec::new();
            tree.write_tsv(&mut buf).map_err(|e| Error::io(&a.out, e))?;
            run.write(a.out.join("taxonomy.tsv"), &buf)?;
            for (name, edges) in [("train.tsv", &split.train), ("test.tsv", &split.test)] {
                let mut buf = Vec::new();
                RelationSplit::write_tsv(&tree, edges, &mut buf).map_err(|e| Error::io(&a.out, e))?;
                run.write(a.out.join(name), &buf)?;
            }
            config = serde_json::json!({
                "kind": "taxonomy", "branching": a.branching, "depth": a.depth, "test_fraction": a.test_fraction,
            });
        }
        SynthKind::Interactions => {
            let knobs = SynthInteractions::default();
            let data = synth_interactions(&tree, a.users, a.seed, &knobs)?;
            let mut buf = Vec::new();
            data.write_histories(&mut buf).map_err(|e| Error::io(&a.out, e))?;
            run.write(a.out.join("histories.tsv"), &buf)?;
            let mut buf = Vec::new();
            data.write_embeddings(&mut buf).map_err(|e| Error::io(&a.out, e))?;
            run.write(a.out.join("embeddings.jsonl"), &buf)?;
            config = serde_json::json!({
                "kind": "interactions", "branching": a.branching, "depth": a.depth, "users": a.users, "generator": knobs,
            });
        }
    }
    run.finish(&a.out.join("manifest.json"), config, Some(a.seed))
}

fn resolve_train_config(a: &TrainArgs, run: &mut Run) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            run.input(p);
            read_json::<TrainConfig>(p)?
        }
        None => TrainConfig::default(),
    };
    a.overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train_quantizer(a: &TrainArgs) -> Result<()> {
    let mut run = Run::new("train-quantizer");
    let cfg = resolve_train_config(a, &mut run)?;
    create_dir(&a.out)?;
    let (checkpoint, tokens, extra, log) = if let Some(path) = &a.embeddings {
        run.input(path);
        let emb = load_embeddings(path)?;
        let ids: Vec<String> = emb.keys().cloned().collect();
        let data: Vec<Vec<f64>> = emb.into_values().collect();
        let (vae, logs) = train_vae(&data, &cfg, |_| {})?;
        let refs: Vec<&[f64]> = data.iter().map(Vec::as_slice).collect();
        let raw = ids.into_iter().zip(vae.tokens(&refs)?.into_iter().map(Multitoken::new)).collect();
        (Checkpoint::Vae(vae), disambiguate(&raw), None, logs)
    } else {
        let path = a.taxonomy.as_ref().ok_or_else(|| Error::Usage("--embeddings or --taxonomy is required".into()))?;
        run.input(path);
        let graph = load_taxonomy(path)?.transitive_closure()?;
        let split = match &a.train_split {
            Some(p) => {
                run.input(p);
                RelationSplit {
                    train: RelationSplit::read_edges(&graph, p)?,
                    test: Vec::new(),
                }
            }
            None => split_relations(&graph, a.test_fraction, cfg.seed)?,
        };
        let (model, logs) = train_hierarchy_embedder(&graph, &split, &cfg, |_, _| {})?;
        let tokens = model.multitokens()?;
        let mut buf = Vec::new();
        crate::data::InteractionDataset {
            items: model.entities.clone(),
            vectors: model.embeddings(),
            sequences: Vec::new(),
        }
        .write_embeddings(&mut buf)
        .map_err(|e| Error::io(&a.out, e))?;
        (Checkpoint::Embedder(model), tokens, Some(buf), logs)
    };
    let codebook = match &checkpoint {
        Checkpoint::Vae(m) => m.codebook(),
        Checkpoint::Embedder(m) => m.codebook(),
    };
    run.write(a.out.join("checkpoint.json"), to_json(&checkpoint)?.as_bytes())?;
    run.write(a.out.join("codebook.json"), codebook.to_json()?.as_bytes())?;
    run.write(a.out.join("tokens.tsv"), &tsv_bytes(cfg.k, &tokens))?;
    let mut lines = Vec::new();
    for l in &log {
        writeln!(lines, "{}", serde_json::to_string(l).map_err(|e| Error::Numeric(e.to_string()))?).expect("memory");
    }
    run.write(a.out.join("loss_log.jsonl"), &lines)?;
    if let Some(buf) = extra {
        run.write(a.out.join("embeddings.jsonl"), &buf)?;
    }
    let seed = cfg.seed;
    run.finish(&a.out.join("manifest.json"), serde_json::to_value(&cfg).expect("config"), Some(seed))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut ck: Checkpoint = read_data_json(path)?;
    match &mut ck {
        Checkpoint::Vae(m) => m.store.ensure_grad_buffers(),
        Checkpoint::Embedder(m) => m.store.ensure_grad_buffers(),
    }
    Ok(ck)
}

fn cmd_encode(a: &EncodeArgs) -> Result<()> {
    let mut run = Run::new("encode");
    let ck = load_checkpoint(&a.checkpoint)?;
    run.input(&a.checkpoint);
    let text = std::fs::read_to_string(&a.codebook).map_err(|e| Error::io(&a.codebook, e))?;
    let codebook = Codebook::from_json(&text)?;
    run.input(&a.codebook);
    if codebook.flavor() != ck.flavor() {
        return Err(Error::Config("codebook and checkpoint use different geometries".into()));
    }
    let emb = load_embeddings(&a.input)?;
    run.input(&a.input);
    let ids: Vec<String> = emb.keys().cloned().collect();
    let xs: Vec<Vec<f64>> = emb.into_values().collect();
    let latents = ck.latents(&xs)?;
    let mut raw = BTreeMap::new();
    for (id, z) in ids.into_iter().zip(&latents) {
        raw.insert(id, Multitoken::new(codebook.encode(z)?));
    }
    run.write(a.out.clone(), &tsv_bytes(codebook.k(), &disambiguate(&raw)))?;
    run.finish(&a.out.with_extension("manifest.json"), serde_json::json!({}), None)
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let mut run = Run::new("analyze");
    let ck = load_checkpoint(&a.checkpoint)?;
    run.input(&a.checkpoint);
    let emb = load_embeddings(&a.input)?;
    run.input(&a.input);
    let ids: Vec<String> = emb.keys().cloned().collect();
    let xs: Vec<Vec<f64>> = emb.into_values().collect();
    if xs.is_empty() {
        return Err(Error::Data(format!("{}: no vectors", a.input.display())));
    }
    let values = latent_norms(&ck.latents(&xs)?, ck.flavor());
    let stats = norms::stats(&values)?;
    create_dir(&a.out)?;
    let mut csv = Vec::new();
    write_norms_csv(&mut csv, &ids, &values).expect("memory");
    run.write(a.out.join("norms.csv"), &csv)?;
    run.write(a.out.join("norms.json"), to_json(&stats)?.as_bytes())?;
    run.finish(&a.out.join("manifest.json"), serde_json::json!({}), None)
}

fn seeds(n: u64) -> Result<Vec<u64>> {
    if n == 0 {
        return Err(Error::Usage("--seeds must be at least 1".into()));
    }
    Ok((0..n).collect())
}

fn write_reports(run: &mut Run, out: &Path, reports: &[MetricsReport]) -> Result<()> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    let mut text = to_json(&reports)?;
    text.push('\n');
    run.write(out.to_path_buf(), text.as_bytes())
}

fn load_tokens(run: &mut Run, path: &Path, k: usize) -> Result<BTreeMap<String, Multitoken>> {
    run.input(path);
    let (tk, tokens) = read_multitokens(path)?;
    if tk != k {
        return Err(Error::Config(format!(
            "{} holds k = {tk} multitokens but the config has k = {k}",
            path.display()
        )));
    }
    Ok(tokens)
}

fn cmd_eval_modeling(a: &EvalModelingArgs) -> Result<()> {
    let mut run = Run::new("eval-modeling");
    let c = &a.common;
    let mut cfg = match &c.config {
        Some(p) => {
            run.input(p);
            read_json::<ModelingConfig>(p)?
        }
        None => ModelingConfig::default(),
    };
    if let Some(e) = c.probe_epochs {
        cfg.probe.epochs = e;
    }
    if let Some(e) = c.quantizer_epochs {
        cfg.quantizer.epochs = e;
    }
    cfg.quantizer.validate()?;
    cfg.probe.validate()?;
    let seeds = seeds(c.seeds)?;
    run.input(&a.taxonomy);
    let graph: TaxonomyGraph = load_taxonomy(&a.taxonomy)?.transitive_closure()?;
    let reports = match &a.tokens {
        Some(tokens) => {
            let tokens = load_tokens(&mut run, tokens, cfg.quantizer.k)?;
            let (train_p, test_p) = (a.train_split.as_ref().expect("clap"), a.test_split.as_ref().expect("clap"));
            run.input(train_p);
            run.input(test_p);
            let split = RelationSplit {
                train: RelationSplit::read_edges(&graph, train_p)?,
                test: RelationSplit::read_edges(&graph, test_p)?,
            };
            let q = &cfg.quantizer;
            let per_seed = run_jobs(&seeds, c.jobs, |&seed| evaluate_modeling(&graph, &split, &tokens, q.k, q.s, cfg.probe, seed))?;
            let mut r = MetricsReport::new(a.name.clone(), serde_json::to_value(&cfg).expect("config"));
            for (seed, m) in seeds.iter().zip(&per_seed) {
                r.push(*seed, m)?;
            }
            vec![r]
        }
        None => run_hierarchy_modeling(&graph, &[Scheme::Rq, Scheme::Hrq], &cfg, &seeds, c.jobs)?,
    };
    write_reports(&mut run, &c.out, &reports)?;
    run.finish(&c.out.with_extension("manifest.json"), serde_json::to_value(&cfg).expect("config"), None)
}

fn cmd_eval_discovery(a: &EvalDiscoveryArgs) -> Result<()> {
    let mut run = Run::new("eval-discovery");
    let c = &a.common;
    let mut cfg = match &c.config {
        Some(p) => {
            run.input(p);
            read_json::<DiscoveryConfig>(p)?
        }
        None => DiscoveryConfig::default(),
    };
    if let Some(e) = c.probe_epochs {
        cfg.probe.epochs = e;
    }
    if let Some(e) = c.quantizer_epochs {
        cfg.quantizer.epochs = e;
    }
    cfg.quantizer.validate()?;
    cfg.probe.validate()?;
    let seeds = seeds(c.seeds)?;
    run.input(&a.histories);
    run.input(&a.embeddings);
    let data = load_interactions(&a.histories, &a.embeddings)?;
    let reports = match &a.tokens {
        Some(tokens) => {
            let tokens = load_tokens(&mut run, tokens, cfg.quantizer.k)?;
            let split = leave_one_out(&data)?;
            let q = &cfg.quantizer;
            let per_seed = run_jobs(&seeds, c.jobs, |&seed| evaluate_discovery(&data, &split, &tokens, q.k, q.s, &cfg, seed))?;
            let mut r = MetricsReport::new(a.name.clone(), serde_json::to_value(&cfg).expect("config"));
            for (seed, (m, valid, _)) in seeds.iter().zip(&per_seed) {
                r.push(*seed, m)?;
                r.push_diagnostic("valid_item_rate", *valid);
            }
            vec![r]
        }
        None => run_hierarchy_discovery(
            &data,
            &[DiscoveryScheme::Random, DiscoveryScheme::Rq, DiscoveryScheme::Hrq],
            &cfg,
            &seeds,
            c.jobs,
        )?,
    };
    write_reports(&mut run, &c.out, &reports)?;
    run.finish(&c.out.with_extension("manifest.json"), serde_json::to_value(&cfg).expect("config"), None)
}
