//! Encoder-decoder transformer over multitoken sequences.
//!
//! The source is a list of multitokens (one noun, or a user's history)
//! flattened into global vocabulary ids. The decoder emits one target
//! multitoken position by position; at position `p` it only scores the ids
//! of that position's segment, so every generated sequence is a valid
//! multitoken. Input and output embeddings are one tied matrix. Layers use
//! pre-normalization and sinusoidal positions.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::beam::{beam_search, RankedPrediction, StepScorer};
use crate::eval::layout::{TokenLayout, BOS, PAD};
use crate::nn::{Adam, AdamConfig, Manifold, ParamId, ParamStore, Parameter, Tape, Var};
use crate::quantizer::Multitoken;
use crate::seed::{rng_for, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub width: usize,
    pub heads: usize,
    pub feed_forward: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beam_width: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ProbeConfig {
    /// Small preset that trains in seconds on one core.
    pub fn desk() -> Self {
        ProbeConfig {
            encoder_layers: 2,
            decoder_layers: 2,
            width: 64,
            heads: 4,
            feed_forward: 256,
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            beam_width: 10,
        }
    }

    /// Four layers each side, width 256, eight heads, feed-forward 1024.
    pub fn full() -> Self {
        ProbeConfig {
            encoder_layers: 4,
            decoder_layers: 4,
            width: 256,
            heads: 8,
            feed_forward: 1024,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("probe: {m}")));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("width must be a positive multiple of heads");
        }
        if self.decoder_layers == 0 || self.encoder_layers == 0 {
            return bad("encoder_layers and decoder_layers must be at least 1");
        }
        if self.feed_forward == 0 || self.batch_size == 0 {
            return bad("feed_forward and batch_size must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.beam_width == 0 {
            return bad("beam_width must be positive");
        }
        Ok(())
    }
}

/// One training or evaluation example: source multitokens and the target.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbePair {
    pub source: Vec<Multitoken>,
    pub target: Multitoken,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Debug, Clone, Copy)]
struct Ff {
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone, Copy)]
struct EncLayer {
    n1: Norm,
    attn: Attn,
    n2: Norm,
    ff: Ff,
}

#[derive(Debug, Clone, Copy)]
struct DecLayer {
    n1: Norm,
    self_attn: Attn,
    n2: Norm,
    cross: Attn,
    n3: Norm,
    ff: Ff,
}

#[derive(Debug, Clone)]
struct Ids {
    embed: ParamId,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
}

#[derive(Debug, Clone)]
pub struct SequenceProbe {
    pub config: ProbeConfig,
    pub layout: TokenLayout,
    pub store: ParamStore,
    ids: Ids,
}

/// Lazily binds parameters to one tape so inference tapes only copy what
/// they touch.
struct Bind<'a> {
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
}

impl<'a> Bind<'a> {
    fn new(store: &'a ParamStore) -> Self {
        Bind {
            store,
            vars: vec![None; store.len()],
        }
    }

    fn get(&mut self, t: &mut Tape, id: ParamId) -> Var {
        *self.vars[id.0].get_or_insert_with(|| t.param(self.store, id))
    }
}

fn sinusoid(pos: usize, width: usize) -> impl Iterator<Item = f64> {
    (0..width).map(move |j| {
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / width as f64);
        let a = pos as f64 * freq;
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

impl SequenceProbe {
    pub fn new(config: ProbeConfig, layout: TokenLayout, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let mut store = ParamStore::new();
        let embed = store.add(Parameter::uniform(
            "embed",
            layout.vocab(),
            w,
            (3.0 / w as f64).sqrt(),
            Manifold::Euclidean,
            rng,
        ));
        let norm = |store: &mut ParamStore, name: &str| Norm {
            gain: store.add(Parameter::new(format!("{name}.gain"), 1, w, vec![1.0; w], Manifold::Euclidean)),
            bias: store.add(Parameter::zeros(format!("{name}.bias"), 1, w, Manifold::Euclidean)),
        };
        let linear = |store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut Rng| Linear {
            w: store.add(Parameter::glorot(format!("{name}.w"), out, inp, rng)),
            b: store.add(Parameter::zeros(format!("{name}.b"), 1, out, Manifold::Euclidean)),
        };
        let attn = |store: &mut ParamStore, name: &str, rng: &mut Rng| Attn {
            q: linear(store, &format!("{name}.q"), w, w, rng),
            k: linear(store, &format!("{name}.k"), w, w, rng),
            v: linear(store, &format!("{name}.v"), w, w, rng),
            o: linear(store, &format!("{name}.o"), w, w, rng),
        };
        let ff = |store: &mut ParamStore, name: &str, rng: &mut Rng| Ff {
            up: linear(store, &format!("{name}.up"), config.feed_forward, w, rng),
            down: linear(store, &format!("{name}.down"), w, config.feed_forward, rng),
        };
        let mut enc = Vec::new();
        for l in 0..config.encoder_layers {
            let name = format!("enc{l}");
            enc.push(EncLayer {
                n1: norm(&mut store, &format!("{name}.n1")),
                attn: attn(&mut store, &format!("{name}.attn"), rng),
                n2: norm(&mut store, &format!("{name}.n2")),
                ff: ff(&mut store, &format!("{name}.ff"), rng),
            });
        }
        let enc_norm = norm(&mut store, "enc.norm");
        let mut dec = Vec::new();
        for l in 0..config.decoder_layers {
            let name = format!("dec{l}");
            dec.push(DecLayer {
                n1: norm(&mut store, &format!("{name}.n1")),
                self_attn: attn(&mut store, &format!("{name}.self"), rng),
                n2: norm(&mut store, &format!("{name}.n2")),
                cross: attn(&mut store, &format!("{name}.cross"), rng),
                n3: norm(&mut store, &format!("{name}.n3")),
                ff: ff(&mut store, &format!("{name}.ff"), rng),
            });
        }
        let dec_norm = norm(&mut store, "dec.norm");
        Ok(SequenceProbe {
            config,
            layout,
            store,
            ids: Ids {
                embed,
                enc,
                enc_norm,
                dec,
                dec_norm,
            },
        })
    }

    /// Global ids of a source list, rejecting tokens outside the layout.
    pub fn source_ids(&self, source: &[Multitoken]) -> Result<Vec<usize>> {
        if source.is_empty() {
            return Err(Error::Data("probe source is empty".into()));
        }
        let mut ids = Vec::with_capacity(source.len() * self.layout.positions());
        for mt in source {
            self.check(mt)?;
            ids.extend(self.layout.encode(mt));
        }
        Ok(ids)
    }

    fn check(&self, mt: &Multitoken) -> Result<()> {
        let l = &self.layout;
        let ok = mt.tokens.len() == l.k && mt.tokens.iter().all(|&t| t < l.s) && mt.disambiguator.unwrap_or(0) < l.d;
        if ok {
            Ok(())
        } else {
            Err(Error::Data(format!("multitoken {mt:?} outside the probe vocabulary")))
        }
    }

    fn norm(&self, t: &mut Tape, b: &mut Bind, n: Norm, x: Var) -> Var {
        let g = b.get(t, n.gain);
        let bias = b.get(t, n.bias);
        t.layer_norm(x, g, bias)
    }

    fn linear(&self, t: &mut Tape, b: &mut Bind, l: Linear, x: Var) -> Var {
        let w = b.get(t, l.w);
        let bias = b.get(t, l.b);
        let y = t.matmul_bt(x, w);
        t.add_row(y, bias)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend(
        &self,
        t: &mut Tape,
        b: &mut Bind,
        a: Attn,
        xq: Var,
        xkv: Var,
        batch: usize,
        tq: usize,
        tk: usize,
        causal: bool,
        lens: &[usize],
    ) -> Var {
        let q = self.linear(t, b, a.q, xq);
        let k = self.linear(t, b, a.k, xkv);
        let v = self.linear(t, b, a.v, xkv);
        let h = t.attention(q, k, v, batch, tq, tk, self.config.heads, causal, lens);
        self.linear(t, b, a.o, h)
    }

    fn feed_forward(&self, t: &mut Tape, b: &mut Bind, f: Ff, x: Var) -> Var {
        let h = self.linear(t, b, f.up, x);
        let h = t.relu(h);
        self.linear(t, b, f.down, h)
    }

    /// Scaled token embeddings plus positions for `batch` rows of `len` ids.
    fn embed(&self, t: &mut Tape, b: &mut Bind, ids: &[usize], len: usize) -> Var {
        let w = self.config.width;
        let e = b.get(t, self.ids.embed);
        let x = t.gather_rows(e, ids);
        let x = t.affine(x, (w as f64).sqrt(), 0.0);
        let batch = ids.len() / len;
        let pos: Vec<f64> = (0..batch).flat_map(|_| (0..len).flat_map(|p| sinusoid(p, w))).collect();
        let pos = t.leaf(ids.len(), w, pos);
        t.add(x, pos)
    }

    /// Encoder memory for padded sources; returns the memory, its length
    /// per example and the padded length.
    fn encode(&self, t: &mut Tape, b: &mut Bind, sources: &[Vec<usize>]) -> (Var, Vec<usize>, usize) {
        let tk = sources.iter().map(Vec::len).max().unwrap_or(1);
        let lens: Vec<usize> = sources.iter().map(Vec::len).collect();
        let ids: Vec<usize> = sources
            .iter()
            .flat_map(|s| s.iter().copied().chain(std::iter::repeat_n(PAD, tk - s.len())))
            .collect();
        let mut x = self.embed(t, b, &ids, tk);
        for l in &self.ids.enc {
            let h = self.norm(t, b, l.n1, x);
            let h = self.attend(t, b, l.attn, h, h, sources.len(), tk, tk, false, &lens);
            x = t.add(x, h);
            let h = self.norm(t, b, l.n2, x);
            let h = self.feed_forward(t, b, l.ff, h);
            x = t.add(x, h);
        }
        (self.norm(t, b, self.ids.enc_norm, x), lens, tk)
    }

    /// Decoder hidden states for `inputs` (all of length `tq`).
    fn decode(&self, t: &mut Tape, b: &mut Bind, memory: Var, lens: &[usize], tk: usize, inputs: &[usize], tq: usize) -> Var {
        let batch = inputs.len() / tq;
        let self_lens = vec![tq; batch];
        let mut x = self.embed(t, b, inputs, tq);
        for l in &self.ids.dec {
            let h = self.norm(t, b, l.n1, x);
            let h = self.attend(t, b, l.self_attn, h, h, batch, tq, tq, true, &self_lens);
            x = t.add(x, h);
            let h = self.norm(t, b, l.n2, x);
            let h = self.attend(t, b, l.cross, h, memory, batch, tq, tk, false, lens);
            x = t.add(x, h);
            let h = self.norm(t, b, l.n3, x);
            let h = self.feed_forward(t, b, l.ff, h);
            x = t.add(x, h);
        }
        self.norm(t, b, self.ids.dec_norm, x)
    }

    /// Logits over position `p`'s segment for the given hidden rows.
    fn segment_logits(&self, t: &mut Tape, b: &mut Bind, hidden: Var, p: usize) -> Var {
        let (start, size) = self.layout.segment(p);
        let rows: Vec<usize> = (start..start + size).collect();
        let e = b.get(t, self.ids.embed);
        let seg = t.gather_rows(e, &rows);
        t.matmul_bt(hidden, seg)
    }

    /// Teacher-forced mean cross-entropy over all target positions.
    fn batch_loss(&self, t: &mut Tape, b: &mut Bind, sources: &[Vec<usize>], targets: &[Vec<usize>]) -> Var {
        let tq = self.layout.positions();
        let (memory, lens, tk) = self.encode(t, b, sources);
        let inputs: Vec<usize> = targets
            .iter()
            .flat_map(|local| {
                std::iter::once(BOS).chain((0..tq - 1).map(|p| self.layout.segment(p).0 + local[p]))
            })
            .collect();
        let hidden = self.decode(t, b, memory, &lens, tk, &inputs, tq);
        let mut terms = Vec::with_capacity(tq);
        for p in 0..tq {
            let rows: Vec<usize> = (0..targets.len()).map(|i| i * tq + p).collect();
            let h = t.gather_rows(hidden, &rows);
            let logits = self.segment_logits(t, b, h, p);
            let tg: Vec<usize> = targets.iter().map(|local| local[p]).collect();
            terms.push(t.cross_entropy(logits, &tg));
        }
        let total = t.add_all(&terms);
        t.affine(total, 1.0 / tq as f64, 0.0)
    }

    /// Mean loss over `pairs` without touching gradients.
    pub fn loss(&self, pairs: &[ProbePair]) -> Result<f64> {
        let (sources, targets) = self.prepare(pairs)?;
        let mut total = 0.0;
        for (s, tg) in sources.chunks(self.config.batch_size).zip(targets.chunks(self.config.batch_size)) {
            let mut t = Tape::new();
            let mut b = Bind::new(&self.store);
            let l = self.batch_loss(&mut t, &mut b, s, tg);
            total += t.scalar(l) * s.len() as f64;
        }
        Ok(total / pairs.len().max(1) as f64)
    }

    fn prepare(&self, pairs: &[ProbePair]) -> Result<(Vec<Vec<usize>>, Vec<Vec<usize>>)> {
        let mut sources = Vec::with_capacity(pairs.len());
        let mut targets = Vec::with_capacity(pairs.len());
        for p in pairs {
            sources.push(self.source_ids(&p.source)?);
            self.check(&p.target)?;
            targets.push(self.layout.local(&p.target));
        }
        Ok((sources, targets))
    }

    /// Top-`k` target multitokens for one source by beam search.
    pub fn generate(&self, source: &[Multitoken], k: usize) -> Result<RankedPrediction> {
        let ids = self.source_ids(source)?;
        let mut t = Tape::new();
        let mut b = Bind::new(&self.store);
        let (memory, _, tk) = self.encode(&mut t, &mut b, std::slice::from_ref(&ids));
        let scorer = Scorer {
            probe: self,
            memory: t.value(memory).to_vec(),
            tk,
        };
        beam_search(&scorer, k, self.config.beam_width.max(k))
    }

    /// Like [`SequenceProbe::generate`] but returns multitokens.
    pub fn generate_multitokens(&self, source: &[Multitoken], k: usize) -> Result<Vec<Multitoken>> {
        Ok(self
            .generate(source, k)?
            .candidates
            .iter()
            .map(|c| self.layout.from_local(c))
            .collect())
    }
}

struct Scorer<'a> {
    probe: &'a SequenceProbe,
    memory: Vec<f64>,
    tk: usize,
}

impl StepScorer for Scorer<'_> {
    fn positions(&self) -> usize {
        self.probe.layout.positions()
    }

    fn log_probs(&self, prefixes: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let p = self.probe;
        let n = prefixes.len();
        let len = prefixes[0].len();
        let tq = len + 1;
        let w = p.config.width;
        let mut t = Tape::new();
        let mut b = Bind::new(&p.store);
        let mem: Vec<f64> = (0..n).flat_map(|_| self.memory.iter().copied()).collect();
        let memory = t.leaf(n * self.tk, w, mem);
        let inputs: Vec<usize> = prefixes
            .iter()
            .flat_map(|pre| std::iter::once(BOS).chain(pre.iter().enumerate().map(|(q, &tok)| p.layout.segment(q).0 + tok)))
            .collect();
        let lens = vec![self.tk; n];
        let hidden = p.decode(&mut t, &mut b, memory, &lens, self.tk, &inputs, tq);
        let rows: Vec<usize> = (0..n).map(|i| i * tq + len).collect();
        let h = t.gather_rows(hidden, &rows);
        let logits = p.segment_logits(&mut t, &mut b, h, len);
        let size = t.shape(logits).1;
        t.value(logits)
            .chunks(size)
            .map(|row| {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.iter().map(|v| v - lse).collect()
            })
            .collect()
    }
}

/// Mini-batch Adam training of a probe, one epoch at a time.
pub struct ProbeTrainer {
    probe: SequenceProbe,
    adam: Adam,
    sources: Vec<Vec<usize>>,
    targets: Vec<Vec<usize>>,
    order: Vec<usize>,
    rng: Rng,
    epoch: usize,
}

impl ProbeTrainer {
    pub fn new(pairs: &[ProbePair], layout: TokenLayout, config: ProbeConfig, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("probe needs at least one training pair".into()));
        }
        let probe = SequenceProbe::new(config, layout, &mut rng_for(seed, "probe/init"))?;
        let (sources, targets) = probe.prepare(pairs)?;
        let adam = Adam::new(
            AdamConfig {
                lr: config.lr,
                ..AdamConfig::default()
            },
            &probe.store,
        );
        Ok(ProbeTrainer {
            adam,
            order: (0..sources.len()).collect(),
            sources,
            targets,
            rng: rng_for(seed, "probe/order"),
            epoch: 0,
            probe,
        })
    }

    /// One pass over the shuffled pairs; returns the mean batch loss.
    pub fn epoch(&mut self) -> Result<f64> {
        self.order.shuffle(&mut self.rng);
        let bs = self.probe.config.batch_size;
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in self.order.chunks(bs) {
            let sources: Vec<Vec<usize>> = chunk.iter().map(|&i| self.sources[i].clone()).collect();
            let targets: Vec<Vec<usize>> = chunk.iter().map(|&i| self.targets[i].clone()).collect();
            let mut t = Tape::new();
            let loss = {
                let mut b = Bind::new(&self.probe.store);
                self.probe.batch_loss(&mut t, &mut b, &sources, &targets)
            };
            let l = t.scalar(loss);
            if !l.is_finite() {
                return Err(Error::Numeric(format!("probe loss became {l} in epoch {}", self.epoch)));
            }
            t.backward_into(loss, &mut self.probe.store)?;
            self.adam.step(&mut self.probe.store);
            total += l;
            batches += 1;
        }
        self.epoch += 1;
        Ok(total / batches as f64)
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn probe(&self) -> &SequenceProbe {
        &self.probe
    }

    pub fn into_probe(self) -> SequenceProbe {
        self.probe
    }
}

/// Train for `config.epochs` epochs and return the probe with its loss
/// curve.
pub fn train_probe(pairs: &[ProbePair], layout: TokenLayout, config: ProbeConfig, seed: u64) -> Result<(SequenceProbe, Vec<f64>)> {
    let mut trainer = ProbeTrainer::new(pairs, layout, config, seed)?;
    let losses = (0..config.epochs).map(|_| trainer.epoch()).collect::<Result<Vec<f64>>>()?;
    Ok((trainer.into_probe(), losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn tiny() -> ProbeConfig {
        ProbeConfig {
            encoder_layers: 1,
            decoder_layers: 1,
            width: 16,
            heads: 2,
            feed_forward: 32,
            epochs: 400,
            batch_size: 10,
            lr: 1e-2,
            beam_width: 4,
        }
    }

    fn random_mt(rng: &mut Rng, k: usize, s: usize) -> Multitoken {
        Multitoken::with_disambiguator((0..k).map(|_| rng.random_range(0..s)).collect(), 0)
    }

    fn pairs(n: usize, seed: u64) -> (Vec<ProbePair>, TokenLayout) {
        let mut rng = rng_for(seed, "test");
        let layout = TokenLayout { k: 2, s: 8, d: 1 };
        let pairs = (0..n)
            .map(|i| ProbePair {
                source: vec![Multitoken::with_disambiguator(vec![i / 8 % 8, i % 8], 0)],
                target: random_mt(&mut rng, 2, 8),
            })
            .collect();
        (pairs, layout)
    }

    #[test]
    fn memorizes_ten_pairs() {
        let (pairs, layout) = pairs(10, 0);
        let (probe, _) = train_probe(&pairs, layout, tiny(), 0).unwrap();
        for p in &pairs {
            let top = probe.generate_multitokens(&p.source, 1).unwrap();
            assert_eq!(top[0], p.target);
        }
    }

    #[test]
    fn loss_falls_and_is_deterministic() {
        let (pairs, layout) = pairs(500, 1);
        let config = ProbeConfig {
            epochs: 5,
            lr: 3e-3,
            batch_size: 32,
            ..tiny()
        };
        let (_, a) = train_probe(&pairs, layout, config, 3).unwrap();
        let (_, b) = train_probe(&pairs, layout, config, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[1] < w[0]), "{a:?}");
    }

    #[test]
    fn beam_is_valid_sorted_and_distinct() {
        let (pairs, layout) = pairs(20, 2);
        let config = ProbeConfig { epochs: 3, ..tiny() };
        let (probe, _) = train_probe(&pairs, layout, config, 0).unwrap();
        let r = probe.generate(&pairs[0].source, 4).unwrap();
        assert_eq!(r.candidates.len(), 4);
        assert!(r.scores.windows(2).all(|w| w[0] >= w[1]));
        let mut c = r.candidates.clone();
        c.dedup();
        assert_eq!(c.len(), 4);
        for cand in &r.candidates {
            assert!(cand[0] < 8 && cand[1] < 8 && cand[2] < 1);
        }
        // Generated log-probabilities agree with the teacher-forced loss.
        let target = layout.from_local(&r.candidates[0]);
        let nll = probe
            .loss(&[ProbePair {
                source: pairs[0].source.clone(),
                target,
            }])
            .unwrap();
        assert!((nll * 3.0 + r.scores[0]).abs() < 1e-9);
    }

    #[test]
    fn rejects_out_of_vocabulary_tokens() {
        let (mut pairs, layout) = pairs(3, 0);
        pairs[1].target = Multitoken::with_disambiguator(vec![9, 0], 0);
        assert!(matches!(ProbeTrainer::new(&pairs, layout, tiny(), 0), Err(Error::Data(_))));
    }
}
