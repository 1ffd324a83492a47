//! Few-shot fine-tuning via Association and DIscrimination (FADI) on feature
//! embeddings.
//!
//! The pipeline splits novel-class fine-tuning into two steps. The
//! *association* step pairs every novel class with a semantically similar
//! base class (Lin similarity over a hypernym taxonomy) and aligns the novel
//! feature distribution to it by training a dedicated fc layer on
//! pseudo-labeled shots. The *discrimination* step then separates novel
//! classes from their associated base classes with disentangled
//! base/novel branches and a set-specialized margin loss on top of cosine
//! logits.
//!
//! Everything runs on plain `f64` feature vectors: a synthetic episode
//! generator stands in for frozen detector features, and the `cli` module
//! drives the full base-train / associate / discriminate / evaluate loop.

pub mod association;
pub mod checkpoint;
pub mod cli;
pub mod episodes;
pub mod losses;
pub mod nethead;
pub mod pipeline;
pub mod taxonomy;

pub use association::{assign, pseudo_relabel, AssignPolicy, AssociationMap};
pub use episodes::{evaluate, generate_world, Episode, EvalReport, WorldConfig};
pub use losses::{LabelPartition, MarginConfig};
pub use nethead::{CosineClassifier, DualHead, LinearLayer, Matrix};
pub use pipeline::{
    association_step, base_train, discrimination_step, tfa_baseline_finetune, SgdConfig,
};
pub use taxonomy::{SimilarityMatrix, Taxonomy};
