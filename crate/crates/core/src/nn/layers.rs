//! Feed-forward layers and stacks of them.
//!
//! A Euclidean layer computes `act(x W^T + b)`. A hyperbolic layer maps its
//! ball-valued input to the tangent space at the origin, applies `W` there,
//! maps back, Möbius-adds the ball-valued bias and optionally applies HReLU.
//! Weights are Euclidean parameters; hyperbolic biases are ball parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Flavor;
use crate::nn::hyper;
use crate::nn::param::{Manifold, ParamId, ParamStore, Parameter};
use crate::nn::tape::{Tape, Var};
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
    HRelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub input: usize,
    pub output: usize,
    pub activation: Activation,
    pub flavor: Flavor,
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.output == 0 {
            return Err(Error::Config("layer dimensions must be positive".into()));
        }
        match (self.activation, self.flavor) {
            (Activation::HRelu, Flavor::Euclidean) => {
                Err(Error::Config("HReLU needs a hyperbolic layer".into()))
            }
            (Activation::Relu, Flavor::Hyperbolic { .. }) => {
                Err(Error::Config("hyperbolic layers use HReLU, not ReLU".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Layer {
    /// Register a Glorot-initialized weight and a zero bias in `store`.
    pub fn new(store: &mut ParamStore, spec: LayerSpec, name: &str, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let weight = store.add(Parameter::glorot(format!("{name}.weight"), spec.output, spec.input, rng));
        let manifold = match spec.flavor {
            Flavor::Euclidean => Manifold::Euclidean,
            Flavor::Hyperbolic { c } => Manifold::Ball { c },
        };
        let bias = store.add(Parameter::zeros(format!("{name}.bias"), 1, spec.output, manifold));
        Ok(Layer { spec, weight, bias })
    }

    pub fn bind(&self, t: &mut Tape, store: &ParamStore) -> BoundLayer {
        BoundLayer {
            spec: self.spec,
            weight: t.param(store, self.weight),
            bias: t.param(store, self.bias),
        }
    }
}

/// A layer whose parameters are leaves on one tape.
#[derive(Debug, Clone, Copy)]
pub struct BoundLayer {
    pub spec: LayerSpec,
    pub weight: Var,
    pub bias: Var,
}

impl BoundLayer {
    /// Forward a batch `x` of shape `[batch, input]`.
    pub fn forward(&self, t: &mut Tape, x: Var) -> Var {
        match self.spec.flavor {
            Flavor::Euclidean => {
                let z = t.matmul_bt(x, self.weight);
                let z = t.add_row(z, self.bias);
                match self.spec.activation {
                    Activation::Relu => t.relu(z),
                    _ => z,
                }
            }
            Flavor::Hyperbolic { c } => {
                let ball = crate::geometry::PoincareBall::new(c);
                let l = hyper::log0(t, &ball, x);
                let z = t.matmul_bt(l, self.weight);
                let e = hyper::exp0(t, &ball, z);
                let y = hyper::mobius_add(t, &ball, e, self.bias);
                match self.spec.activation {
                    Activation::HRelu => hyper::hrelu(t, &ball, y),
                    _ => y,
                }
            }
        }
    }
}

/// A stack of layers with a hidden activation and a linear output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

impl Mlp {
    /// Layer sizes `dims[0] -> dims[1] -> ... -> dims[n]`; every layer but
    /// the last uses ReLU (Euclidean) or HReLU (hyperbolic).
    pub fn new(store: &mut ParamStore, dims: &[usize], flavor: Flavor, name: &str, rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("{name} needs at least an input and an output size")));
        }
        let hidden = match flavor {
            Flavor::Euclidean => Activation::Relu,
            Flavor::Hyperbolic { .. } => Activation::HRelu,
        };
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let spec = LayerSpec {
                    input: dims[i],
                    output: dims[i + 1],
                    activation: if i + 1 < n { hidden } else { Activation::None },
                    flavor,
                };
                Layer::new(store, spec, &format!("{name}.{i}"), rng)
            })
            .collect::<Result<_>>()?;
        Ok(Mlp { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.input
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].spec.output
    }

    pub fn bind(&self, t: &mut Tape, store: &ParamStore) -> Vec<BoundLayer> {
        self.layers.iter().map(|l| l.bind(t, store)).collect()
    }
}

pub fn forward_all(t: &mut Tape, layers: &[BoundLayer], x: Var) -> Var {
    layers.iter().fold(x, |h, l| l.forward(t, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PoincareBall;
    use crate::seed::rng_for;
    use approx::assert_abs_diff_eq;

    fn set(store: &mut ParamStore, id: ParamId, values: &[f64]) {
        store.get_mut(id).values = values.to_vec();
    }

    #[test]
    fn euclidean_identity_and_relu() {
        let mut store = ParamStore::new();
        let spec = LayerSpec {
            input: 2,
            output: 2,
            activation: Activation::Relu,
            flavor: Flavor::Euclidean,
        };
        let layer = Layer::new(&mut store, spec, "l", &mut rng_for(0, "l")).unwrap();
        set(&mut store, layer.weight, &[1.0, 0.0, 0.0, 1.0]);
        let mut t = Tape::new();
        let b = layer.bind(&mut t, &store);
        let x = t.leaf(2, 2, vec![0.5, -0.25, -1.0, 2.0]);
        let y = b.forward(&mut t, x);
        assert_eq!(t.value(y), &[0.5, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn euclidean_matches_explicit_loops() {
        let mut store = ParamStore::new();
        let spec = LayerSpec {
            input: 3,
            output: 2,
            activation: Activation::None,
            flavor: Flavor::Euclidean,
        };
        let layer = Layer::new(&mut store, spec, "l", &mut rng_for(3, "l")).unwrap();
        set(&mut store, layer.bias, &[0.1, -0.2]);
        let w = store.get(layer.weight).values.clone();
        let x = [0.3, -0.7, 1.1];
        let mut t = Tape::new();
        let b = layer.bind(&mut t, &store);
        let xv = t.vector(&x);
        let y = b.forward(&mut t, xv);
        for o in 0..2 {
            let mut acc = [0.1, -0.2][o];
            for i in 0..3 {
                acc += w[o * 3 + i] * x[i];
            }
            assert_abs_diff_eq!(t.value(y)[o], acc, epsilon = 1e-15);
        }
    }

    #[test]
    fn hyperbolic_identity_origin_and_manual_composition() {
        let ball = PoincareBall::with_curvature(1.0).unwrap();
        let flavor = Flavor::hyperbolic(1.0).unwrap();
        let mut store = ParamStore::new();
        let spec = LayerSpec {
            input: 2,
            output: 2,
            activation: Activation::None,
            flavor,
        };
        let layer = Layer::new(&mut store, spec, "h", &mut rng_for(0, "h")).unwrap();
        set(&mut store, layer.weight, &[1.0, 0.0, 0.0, 1.0]);
        let mut t = Tape::new();
        let b = layer.bind(&mut t, &store);
        let x = t.leaf(2, 2, vec![0.3, -0.4, 0.0, 0.0]);
        let y = b.forward(&mut t, x);
        assert_abs_diff_eq!(t.value(y)[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(t.value(y)[1], -0.4, epsilon = 1e-12);
        assert_eq!(&t.value(y)[2..], &[0.0, 0.0]);

        set(&mut store, layer.weight, &[2.0, 0.0, 0.0, 0.5]);
        set(&mut store, layer.bias, &[0.1, 0.2]);
        let mut t = Tape::new();
        let b = layer.bind(&mut t, &store);
        let x = t.vector(&[0.3, -0.4]);
        let y = b.forward(&mut t, x);
        let l = ball.log0(&[0.3, -0.4]);
        let expect = ball.mobius_add(&ball.exp0(&[2.0 * l[0], 0.5 * l[1]]), &[0.1, 0.2]);
        assert_abs_diff_eq!(t.value(y)[0], expect[0], epsilon = 1e-14);
        assert_abs_diff_eq!(t.value(y)[1], expect[1], epsilon = 1e-14);
    }

    #[test]
    fn hrelu_requires_hyperbolic() {
        let spec = LayerSpec {
            input: 2,
            output: 2,
            activation: Activation::HRelu,
            flavor: Flavor::Euclidean,
        };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }
}
