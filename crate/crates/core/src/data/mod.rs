//! Datasets: taxonomies for hierarchy modeling and interaction histories
//! for hierarchy discovery, with loaders, synthetic generators and splits.

pub mod interactions;
pub mod taxonomy;

pub use interactions::{
    leave_one_out, load_embeddings, load_interactions, synth_interactions, InteractionDataset, LeaveOneOut, SynthInteractions,
    UserSplit,
};
pub use taxonomy::{load_taxonomy, split_relations, synth_tree, RelationSplit, TaxonomyGraph};
