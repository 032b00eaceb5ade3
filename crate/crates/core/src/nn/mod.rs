//! Reverse-mode differentiation, layers and optimizers.

pub mod hyper;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tape;

pub use optim::{Adam, AdamConfig};
pub use layers::{Activation, Layer, LayerSpec, Mlp};
pub use param::{Manifold, ParamId, ParamStore, Parameter};
pub use tape::{Tape, Var};
