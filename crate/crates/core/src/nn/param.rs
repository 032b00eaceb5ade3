//! Trainable tensors with a manifold tag.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::geometry::{Curvature, PoincareBall};
use crate::seed::Rng;

/// Where a parameter lives. Ball parameters are matrices whose rows are
/// individual points on the Poincaré ball.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Manifold {
    Euclidean,
    Ball { c: Curvature },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    pub manifold: Manifold,
}

impl Parameter {
    pub fn new(name: impl Into<String>, rows: usize, cols: usize, values: Vec<f64>, manifold: Manifold) -> Self {
        assert_eq!(values.len(), rows * cols, "parameter shape");
        let values = match manifold {
            Manifold::Euclidean => values,
            Manifold::Ball { c } => {
                let ball = PoincareBall::new(c);
                values.chunks(cols.max(1)).flat_map(|r| ball.project(r)).collect()
            }
        };
        Parameter {
            name: name.into(),
            rows,
            cols,
            grad: vec![0.0; values.len()],
            values,
            manifold,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize, manifold: Manifold) -> Self {
        Parameter::new(name, rows, cols, vec![0.0; rows * cols], manifold)
    }

    /// Glorot-uniform initialization for a `fan_out x fan_in` weight.
    pub fn glorot(name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let values = (0..rows * cols).map(|_| rng.random_range(-limit..limit)).collect();
        Parameter::new(name, rows, cols, values, Manifold::Euclidean)
    }

    /// Uniform initialization in `(-scale, scale)`.
    pub fn uniform(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        scale: f64,
        manifold: Manifold,
        rng: &mut Rng,
    ) -> Self {
        let values = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
        Parameter::new(name, rows, cols, values, manifold)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn zero_grad(&mut self) {
        self.grad.clear();
        self.grad.resize(self.values.len(), 0.0);
    }

    pub fn grad_row(&self, r: usize) -> &[f64] {
        &self.grad[r * self.cols..(r + 1) * self.cols]
    }
}

/// Owns every parameter of a model; [`ParamId`]s index into it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, p: Parameter) -> ParamId {
        self.params.push(p);
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.zero_grad();
        }
    }

    /// Multiply every accumulated gradient by `factor`.
    pub fn scale_grad(&mut self, factor: f64) {
        for p in &mut self.params {
            for g in &mut p.grad {
                *g *= factor;
            }
        }
    }

    /// Restore gradient buffers after deserialization.
    pub fn ensure_grad_buffers(&mut self) {
        for p in &mut self.params {
            if p.grad.len() != p.values.len() {
                p.zero_grad();
            }
        }
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(Parameter::len).sum()
    }
}
