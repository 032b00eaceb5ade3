//! Straight-line re-implementation of the (H)RQ-VAE forward pass, written
//! without the library's geometry or tape code.

use hrq::models::{Scheme, TrainConfig, Vae};
use hrq::seed::rng_for;
use rand::Rng as _;

const EPS: f64 = 1e-5;

struct Ball {
    c: f64,
}

impl Ball {
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    fn project(&self, x: Vec<f64>) -> Vec<f64> {
        let n = Self::dot(&x, &x).sqrt();
        let max = (1.0 - EPS) / self.c.sqrt();
        if n < max {
            x
        } else {
            x.iter().map(|v| v * max / n).collect()
        }
    }

    fn exp0(&self, v: &[f64]) -> Vec<f64> {
        let n = Self::dot(v, v).sqrt();
        if n == 0.0 {
            return v.to_vec();
        }
        let a = self.c.sqrt() * n;
        self.project(v.iter().map(|x| x * a.tanh() / a).collect())
    }

    fn log0(&self, y: &[f64]) -> Vec<f64> {
        let n = Self::dot(y, y).sqrt();
        if n == 0.0 {
            return y.to_vec();
        }
        let a = (self.c.sqrt() * n).min(1.0 - 1e-15);
        y.iter().map(|x| x * a.atanh() / a).collect()
    }

    fn add(&self, x: &[f64], y: &[f64]) -> Vec<f64> {
        let c = self.c;
        let (xy, x2, y2) = (Self::dot(x, y), Self::dot(x, x), Self::dot(y, y));
        let den = 1.0 + 2.0 * c * xy + c * c * x2 * y2;
        let out = x
            .iter()
            .zip(y)
            .map(|(a, b)| ((1.0 + 2.0 * c * xy + c * y2) * a + (1.0 - c * x2) * b) / den)
            .collect();
        self.project(out)
    }

    fn dist(&self, u: &[f64], v: &[f64]) -> f64 {
        let c = self.c;
        let d2: f64 = u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        let arg = 1.0 + 2.0 * c * d2 / ((1.0 - c * Self::dot(u, u)) * (1.0 - c * Self::dot(v, v)));
        arg.max(1.0).acosh() / c.sqrt()
    }
}

fn param(vae: &Vae, name: &str) -> (usize, usize, Vec<f64>) {
    let id = vae.store.find(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let p = vae.store.get(id);
    (p.rows, p.cols, p.values.clone())
}

fn matvec(w: &(usize, usize, Vec<f64>), x: &[f64]) -> Vec<f64> {
    (0..w.0).map(|i| (0..w.1).map(|j| w.2[i * w.1 + j] * x[j]).sum()).collect()
}

/// Forward pass through `prefix.0 .. prefix.{n-1}`.
fn mlp(vae: &Vae, prefix: &str, n: usize, ball: Option<&Ball>, mut x: Vec<f64>) -> Vec<f64> {
    for i in 0..n {
        let w = param(vae, &format!("{prefix}.{i}.weight"));
        let b = param(vae, &format!("{prefix}.{i}.bias")).2;
        let last = i + 1 == n;
        x = match ball {
            None => {
                let z: Vec<f64> = matvec(&w, &x).iter().zip(&b).map(|(a, c)| a + c).collect();
                if last {
                    z
                } else {
                    z.into_iter().map(|v| v.max(0.0)).collect()
                }
            }
            Some(ball) => {
                let z = ball.exp0(&matvec(&w, &ball.log0(&x)));
                let z = ball.add(&z, &b);
                if last {
                    z
                } else {
                    let r: Vec<f64> = ball.log0(&z).into_iter().map(|v| v.max(0.0)).collect();
                    ball.exp0(&r)
                }
            }
        };
    }
    x
}

struct Oracle {
    tokens: Vec<usize>,
    rec: f64,
    cmt: f64,
}

fn oracle(vae: &Vae, x: &[f64]) -> Oracle {
    let cfg = &vae.config;
    let ball = (cfg.flavor == Scheme::Hrq).then_some(Ball { c: cfg.c });
    let layers = cfg.hidden.len() + 1;
    let xp = match &ball {
        Some(b) => b.exp0(x),
        None => x.to_vec(),
    };
    let z = mlp(vae, "encoder", layers, ball.as_ref(), xp);
    let mut r = z.clone();
    let mut recon = vec![0.0; cfg.h];
    let mut tokens = Vec::new();
    let mut cmt = 0.0;
    for level in 0..cfg.k {
        let (s, h, cb) = param(vae, &format!("codebook.{level}"));
        let mut best = (0, f64::INFINITY);
        for j in 0..s {
            let e = &cb[j * h..(j + 1) * h];
            let d = match &ball {
                Some(b) => b.dist(&r, e),
                None => r.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt(),
            };
            if d < best.1 {
                best = (j, d);
            }
        }
        let e = cb[best.0 * h..(best.0 + 1) * h].to_vec();
        tokens.push(best.0);
        cmt += (1.0 + cfg.alpha) * best.1 * best.1;
        match &ball {
            Some(b) => {
                let neg: Vec<f64> = e.iter().map(|v| -v).collect();
                r = b.add(&r, &neg);
                recon = b.add(&recon, &e);
            }
            None => {
                r = r.iter().zip(&e).map(|(a, b)| a - b).collect();
                recon = recon.iter().zip(&e).map(|(a, b)| a + b).collect();
            }
        }
    }
    let out = mlp(vae, "decoder", layers, ball.as_ref(), recon);
    let y = match &ball {
        Some(b) => b.log0(&out),
        None => out,
    };
    let rec = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
    Oracle { tokens, rec, cmt }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Compare `Vae::forward` with the oracle on `n` randomized models; returns
/// the number of matching instances.
pub fn check(n: usize) -> usize {
    let mut rng = rng_for(2024, "oracle");
    let mut ok = 0;
    for instance in 0..n {
        let scheme = if instance % 2 == 0 { Scheme::Hrq } else { Scheme::Rq };
        let dim = rng.random_range(2..6);
        let cfg = TrainConfig {
            flavor: scheme,
            c: [0.5, 1.0, 2.0][instance % 3],
            k: rng.random_range(1..4),
            s: rng.random_range(2..9),
            h: rng.random_range(2..5),
            hidden: (0..rng.random_range(0..3)).map(|_| rng.random_range(2..7)).collect(),
            alpha: rng.random_range(0.0..1.0),
            seed: instance as u64,
            ..TrainConfig::default()
        };
        let mut vae = Vae::new(&cfg, dim).unwrap();
        let pool: Vec<Vec<f64>> = (0..16).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let refs: Vec<&[f64]> = pool.iter().map(Vec::as_slice).collect();
        vae.init_codebook(&refs, &mut rng_for(instance as u64, "codebook")).unwrap();
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let got = vae.forward(&x).unwrap();
        let want = oracle(&vae, &x);
        if got.multitoken.tokens == want.tokens && close(got.rec_loss, want.rec) && close(got.cmt_loss, want.cmt) {
            ok += 1;
        } else {
            eprintln!(
                "  oracle instance {instance}: tokens {:?} vs {:?}, rec {} vs {}, cmt {} vs {}",
                got.multitoken.tokens, want.tokens, got.rec_loss, want.rec, got.cmt_loss, want.cmt
            );
        }
    }
    ok
}
