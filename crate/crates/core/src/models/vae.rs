//! RQ-VAE and HRQ-VAE.
//!
//! One struct covers both flavors. The hyperbolic forward pass maps the
//! input onto the ball with `exp_0`, encodes with hyperbolic layers,
//! quantizes with Möbius residuals, decodes with hyperbolic layers and maps
//! the output back with `log_0`; the reconstruction loss `|x - y|^2` is taken
//! in the ambient input space. The Euclidean flavor is the same pipeline
//! with plain layers and the Euclidean quantizer.

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_dim, Error, Result};
use crate::geometry::Flavor;
use crate::models::config::{EpochLog, Scheme, TrainConfig};
use crate::nn::layers::{forward_all, Mlp};
use crate::nn::param::{Manifold, ParamId, ParamStore, Parameter};
use crate::nn::tape::{Tape, Var};
use crate::nn::{hyper, optim};
use crate::quantizer::{quantize_on_tape, Codebook, Multitoken};
use crate::seed::{rng_for, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vae {
    pub config: TrainConfig,
    pub input_dim: usize,
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// One `s x h` parameter per codebook level.
    pub levels: Vec<ParamId>,
    pub store: ParamStore,
}

/// Result of one forward pass on a single input.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeOutput {
    pub multitoken: Multitoken,
    /// Encoder output before quantization.
    pub latent: Vec<f64>,
    /// Decoder output mapped back to the input space.
    pub reconstruction: Vec<f64>,
    pub rec_loss: f64,
    pub cmt_loss: f64,
}

struct Graph {
    tokens: Vec<Vec<usize>>,
    latent: Var,
    y: Var,
    rec: Var,
    cmt: Var,
}

impl Vae {
    /// Glorot-initialized encoder/decoder with an all-zero codebook; call
    /// [`Vae::init_codebook`] before training.
    pub fn new(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let flavor = config.flavor()?;
        let mut rng = rng_for(config.seed, "vae/init");
        let mut store = ParamStore::new();
        let mut enc_dims = vec![input_dim];
        enc_dims.extend(&config.hidden);
        enc_dims.push(config.h);
        let dec_dims: Vec<usize> = enc_dims.iter().rev().copied().collect();
        let encoder = Mlp::new(&mut store, &enc_dims, flavor, "encoder", &mut rng)?;
        let decoder = Mlp::new(&mut store, &dec_dims, flavor, "decoder", &mut rng)?;
        let manifold = match flavor {
            Flavor::Euclidean => Manifold::Euclidean,
            Flavor::Hyperbolic { c } => Manifold::Ball { c },
        };
        let levels = (0..config.k)
            .map(|i| store.add(Parameter::zeros(format!("codebook.{i}"), config.s, config.h, manifold)))
            .collect();
        Ok(Vae {
            config: config.clone(),
            input_dim,
            encoder,
            decoder,
            levels,
            store,
        })
    }

    pub fn rq(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        Vae::new(&TrainConfig { flavor: Scheme::Rq, ..config.clone() }, input_dim)
    }

    pub fn hrq(config: &TrainConfig, input_dim: usize) -> Result<Self> {
        Vae::new(&TrainConfig { flavor: Scheme::Hrq, ..config.clone() }, input_dim)
    }

    pub fn flavor(&self) -> Flavor {
        self.config.flavor().expect("validated at construction")
    }

    /// Snapshot of the current codebook.
    pub fn codebook(&self) -> Codebook {
        let levels = self.levels.iter().map(|&id| self.store.get(id).values.clone()).collect();
        Codebook::new(self.flavor(), self.config.s, self.config.h, levels).expect("codebook parameters are consistent")
    }

    fn input_leaf(&self, t: &mut Tape, xs: &[&[f64]]) -> Result<Var> {
        let mut flat = Vec::with_capacity(xs.len() * self.input_dim);
        for x in xs {
            ensure_dim(self.input_dim, x.len())?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("non-finite input vector".into()));
            }
            flat.extend_from_slice(x);
        }
        Ok(t.leaf(xs.len(), self.input_dim, flat))
    }

    /// Encoder output (on the ball for the hyperbolic flavor).
    fn encode_on(&self, t: &mut Tape, x: Var) -> Var {
        let enc = self.encoder.bind(t, &self.store);
        match self.flavor().ball() {
            Some(ball) => {
                let xp = hyper::exp0(t, &ball, x);
                forward_all(t, &enc, xp)
            }
            None => forward_all(t, &enc, x),
        }
    }

    fn record(&self, t: &mut Tape, xs: &[&[f64]]) -> Result<Graph> {
        if xs.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let flavor = self.flavor();
        let x = self.input_leaf(t, xs)?;
        let latent = self.encode_on(t, x);
        let levels: Vec<Var> = self.levels.iter().map(|&id| t.param(&self.store, id)).collect();
        let q = quantize_on_tape(t, &levels, flavor, self.config.loss_metric, self.config.alpha, latent)?;
        let dec = self.decoder.bind(t, &self.store);
        let decoded = forward_all(t, &dec, q.output);
        let y = match flavor.ball() {
            Some(ball) => hyper::log0(t, &ball, decoded),
            None => decoded,
        };
        let diff = t.sub(x, y);
        let rec = t.sq_norm(diff);
        Ok(Graph {
            tokens: q.tokens,
            latent,
            y,
            rec,
            cmt: q.loss,
        })
    }

    /// Forward pass on a batch without touching gradients.
    pub fn forward_batch(&self, xs: &[&[f64]]) -> Result<Vec<VaeOutput>> {
        let mut t = Tape::new();
        let g = self.record(&mut t, xs)?;
        let (h, d) = (self.config.h, self.input_dim);
        // per-row losses are recomputed from the batch values
        let codebook = self.codebook();
        xs.iter()
            .enumerate()
            .map(|(i, x)| {
                let latent = t.value(g.latent)[i * h..(i + 1) * h].to_vec();
                let reconstruction = t.value(g.y)[i * d..(i + 1) * d].to_vec();
                let rec_loss = x.iter().zip(&reconstruction).map(|(a, b)| (a - b) * (a - b)).sum();
                let q = codebook.quantize(&latent)?;
                let cmt_loss = crate::quantizer::quantization_loss(
                    &q.residuals,
                    &q.codewords,
                    self.config.alpha,
                    self.flavor(),
                    self.config.loss_metric,
                )?;
                Ok(VaeOutput {
                    multitoken: Multitoken::new(g.tokens[i].clone()),
                    latent,
                    reconstruction,
                    rec_loss,
                    cmt_loss,
                })
            })
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Result<VaeOutput> {
        Ok(self.forward_batch(&[x])?.remove(0))
    }

    /// Mean losses over the batch, with their gradients added to the
    /// parameter store. Returns `(rec, cmt, tokens)`.
    pub fn accumulate_gradients(&mut self, xs: &[&[f64]]) -> Result<(f64, f64, Vec<Vec<usize>>)> {
        let mut t = Tape::new();
        let g = self.record(&mut t, xs)?;
        let total = t.add(g.rec, g.cmt);
        let mean = t.affine(total, 1.0 / xs.len() as f64, 0.0);
        let (rec, cmt) = (t.scalar(g.rec), t.scalar(g.cmt));
        if !t.scalar(mean).is_finite() {
            return Err(Error::Numeric(format!("non-finite VAE loss (rec {rec}, cmt {cmt})")));
        }
        t.backward_into(mean, &mut self.store)?;
        let n = xs.len() as f64;
        Ok((rec / n, cmt / n, g.tokens))
    }

    /// Pre-quantization latents.
    pub fn encode_latents(&self, xs: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut t = Tape::new();
        let x = self.input_leaf(&mut t, xs)?;
        let z = self.encode_on(&mut t, x);
        Ok(t.value(z).chunks(self.config.h).map(<[f64]>::to_vec).collect())
    }

    /// Tokens for every input.
    pub fn tokens(&self, xs: &[&[f64]]) -> Result<Vec<Vec<usize>>> {
        let codebook = self.codebook();
        self.encode_latents(xs)?.iter().map(|z| codebook.encode(z)).collect()
    }

    /// Initialize level `i` with `s` samples of the level-`i` residuals of
    /// the encoded `pool`.
    pub fn init_codebook(&mut self, pool: &[&[f64]], rng: &mut Rng) -> Result<()> {
        let latents = self.encode_latents(pool)?;
        let flavor = self.flavor();
        let mut residuals = latents;
        for &id in &self.levels.clone() {
            let picked = sample_rows(&residuals, self.config.s, rng);
            let level: Vec<f64> = picked.iter().flat_map(|&i| residuals[i].clone()).collect();
            self.store.get_mut(id).values = level.clone();
            let h = self.config.h;
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
}

/// `s` distinct row indices when possible, otherwise with replacement.
pub(crate) fn sample_rows<T>(rows: &[T], s: usize, rng: &mut Rng) -> Vec<usize> {
    if rows.len() >= s {
        rand::seq::index::sample(rng, rows.len(), s).into_vec()
    } else {
        (0..s).map(|_| rng.random_range(0..rows.len())).collect()
    }
}

/// Train a VAE of `config.flavor` on `data`, calling `on_epoch` after every
/// epoch.
pub fn train_vae(data: &[Vec<f64>], config: &TrainConfig, mut on_epoch: impl FnMut(&EpochLog)) -> Result<(Vae, Vec<EpochLog>)> {
    if data.is_empty() {
        return Err(Error::Data("no training vectors".into()));
    }
    let mut vae = Vae::new(config, data[0].len())?;
    let mut rng = rng_for(config.seed, "vae/order");
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    let pool_size = config.batch_size.max(config.s).min(data.len());
    let pool: Vec<&[f64]> = order[..pool_size].iter().map(|&i| data[i].as_slice()).collect();
    vae.init_codebook(&pool, &mut rng_for(config.seed, "vae/codebook"))?;

    let mut logs = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut rec, mut cmt) = (0.0, 0.0);
        let mut used = vec![vec![false; config.s]; config.k];
        for chunk in order.chunks(config.batch_size) {
            let xs: Vec<&[f64]> = chunk.iter().map(|&i| data[i].as_slice()).collect();
            let (r, c, tokens) = vae.accumulate_gradients(&xs)?;
            optim::step(&mut vae.store, lr);
            rec += r * xs.len() as f64;
            cmt += c * xs.len() as f64;
            for ts in tokens {
                for (level, t) in ts.into_iter().enumerate() {
                    used[level][t] = true;
                }
            }
        }
        let log = EpochLog {
            epoch,
            lr,
            task: rec / data.len() as f64,
            quantization: cmt / data.len() as f64,
            used_codewords: used.iter().map(|l| l.iter().filter(|&&u| u).count()).collect(),
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok((vae, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(scheme: Scheme) -> TrainConfig {
        TrainConfig {
            flavor: scheme,
            k: 2,
            s: 4,
            h: 3,
            hidden: vec![5],
            batch_size: 4,
            epochs: 3,
            lr: 0.05,
            warmup_epochs: 0,
            ..TrainConfig::default()
        }
    }

    fn data(n: usize, d: usize) -> Vec<Vec<f64>> {
        let mut rng = rng_for(11, "data");
        (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn zero_input_with_zero_network_reconstructs_zero() {
        let mut vae = Vae::hrq(&cfg(Scheme::Hrq), 4).unwrap();
        let ids: Vec<ParamId> = vae.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = vae.store.get_mut(id);
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let out = vae.forward(&[0.0; 4]).unwrap();
        assert_eq!(out.reconstruction, vec![0.0; 4]);
        assert_eq!(out.rec_loss, 0.0);
    }

    #[test]
    fn batch_and_single_forward_agree() {
        for scheme in [Scheme::Rq, Scheme::Hrq] {
            let xs = data(6, 4);
            let mut vae = Vae::new(&cfg(scheme), 4).unwrap();
            let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
            vae.init_codebook(&refs, &mut rng_for(0, "cb")).unwrap();
            let batch = vae.forward_batch(&refs).unwrap();
            for (x, b) in xs.iter().zip(&batch) {
                let single = vae.forward(x).unwrap();
                assert_eq!(single.multitoken, b.multitoken);
                assert_abs_diff_eq!(single.rec_loss, b.rec_loss, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_finite() {
        let xs = data(12, 4);
        for scheme in [Scheme::Rq, Scheme::Hrq] {
            let (a, la) = train_vae(&xs, &cfg(scheme), |_| {}).unwrap();
            let (b, lb) = train_vae(&xs, &cfg(scheme), |_| {}).unwrap();
            assert_eq!(a, b);
            assert_eq!(la, lb);
            assert!(la.iter().all(|l| l.task.is_finite() && l.quantization.is_finite()));
        }
    }

    #[test]
    fn one_small_step_decreases_loss() {
        let xs = data(8, 4);
        let refs: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let mut vae = Vae::hrq(&cfg(Scheme::Hrq), 4).unwrap();
        vae.init_codebook(&refs, &mut rng_for(1, "cb")).unwrap();
        let (r0, c0, _) = vae.accumulate_gradients(&refs).unwrap();
        optim::step(&mut vae.store, 1e-3);
        vae.store.zero_grad();
        let (r1, c1, _) = vae.accumulate_gradients(&refs).unwrap();
        assert!(r1 + c1 < r0 + c0, "{} !< {}", r1 + c1, r0 + c0);
    }
}
