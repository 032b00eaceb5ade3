//! Optimizers: Euclidean SGD, Riemannian SGD on the ball, and Adam.

use serde::{Deserialize, Serialize};

use crate::geometry::PoincareBall;
use crate::nn::param::{Manifold, ParamId, ParamStore, Parameter};

/// `p <- p - lr * g`, then clear the gradient.
pub fn sgd_step(p: &mut Parameter, lr: f64) {
    for (v, g) in p.values.iter_mut().zip(&p.grad) {
        *v -= lr * g;
    }
    p.zero_grad();
}

/// Riemannian SGD for a parameter whose rows are ball points.
///
/// The ambient gradient is rescaled by the inverse metric
/// `(1 - c|p|^2)^2 / 4`, the point moves along the exponential map, and the
/// result is projected back inside the ball.
pub fn rsgd_step(p: &mut Parameter, lr: f64, ball: &PoincareBall) {
    let cols = p.cols;
    for r in 0..p.rows {
        let g = &p.grad[r * cols..(r + 1) * cols];
        if g.iter().all(|&x| x == 0.0) {
            continue;
        }
        let row = &p.values[r * cols..(r + 1) * cols];
        let f = (1.0 - ball.c() * crate::geometry::sq_norm(row)).powi(2) / 4.0;
        let step: Vec<f64> = g.iter().map(|x| -lr * f * x).collect();
        let next = ball.project(&ball.exp_map(row, &step));
        p.values[r * cols..(r + 1) * cols].copy_from_slice(&next);
    }
    p.zero_grad();
}

/// One step over every parameter, dispatching on its manifold tag.
pub fn step(store: &mut ParamStore, lr: f64) {
    let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let p = store.get_mut(id);
        match p.manifold {
            Manifold::Euclidean => sgd_step(p, lr),
            Manifold::Ball { c } => rsgd_step(p, lr, &PoincareBall::new(c)),
        }
    }
}

/// Learning rate for `epoch` under the warm-up schedule.
pub fn warmup_lr(epoch: usize, warmup_epochs: usize, warmup_lr: f64, lr: f64) -> f64 {
    if epoch < warmup_epochs {
        warmup_lr
    } else {
        lr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam for Euclidean parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let m: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.len()]).collect();
        Adam {
            config,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t);
        let bc2 = 1.0 - beta2.powi(self.t);
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let p = store.get_mut(id);
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p.values[i] -= lr * mh / (vh.sqrt() + eps);
            }
            p.zero_grad();
        }
    }
}
