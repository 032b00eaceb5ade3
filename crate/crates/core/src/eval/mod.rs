//! Downstream probes, ranking metrics, baselines and norm analysis.

pub mod baseline;
pub mod beam;
pub mod layout;
pub mod metrics;
pub mod norms;
pub mod probe;
pub mod protocols;

pub use baseline::random_baseline_tokens;
pub use beam::{beam_search, RankedPrediction, StepScorer};
pub use layout::TokenLayout;
pub use metrics::{mean_std, ndcg_at_k, recall_at_k, MetricsReport};
pub use norms::{latent_norms, norm_analysis, write_norms_csv, NormStats};
pub use probe::{train_probe, ProbeConfig, ProbePair, ProbeTrainer, SequenceProbe};
pub use protocols::{
    discovery_run, evaluate_discovery, evaluate_modeling, run_hierarchy_discovery, run_hierarchy_modeling, DiscoveryConfig,
    DiscoveryRun, DiscoveryScheme, ModelingConfig,
};
