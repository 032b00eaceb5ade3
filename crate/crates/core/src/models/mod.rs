//! Trainable models: the (H)RQ-VAE and the contrastive hierarchy embedder.

pub mod config;
pub mod embedder;
pub mod vae;

pub use config::{EpochLog, Scheme, TrainConfig};
pub use embedder::{contrastive_term, train_hierarchy_embedder, HierarchyEmbedder};
pub use vae::{train_vae, Vae, VaeOutput};
