//! Hyperbolic and Euclidean residual quantization.

pub mod cli;
pub mod data;
pub mod eval;
pub mod error;
pub mod geometry;
pub mod models;
pub mod nn;
pub mod quantizer;
pub mod seed;

pub use error::{Error, Result};

/// Guide chapters, compiled as doctests so their snippets stay current.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/geometry.md")]
    pub mod geometry {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/quantization.md")]
    pub mod quantization {}
    #[doc = include_str!("../../../book/src/models.md")]
    pub mod models {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    pub mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    pub mod cli {}
}
