//! Explainable depression severity estimation.
//!
//! A post is encoded at word, sentence and post level with multi-head
//! self-attention, a symptom knowledge graph is encoded with GIN and GAT
//! layers, and the concatenation is classified on an ordinal scale trained
//! with soft labels. [`explain`] turns attention weights and a learned edge
//! mask into per-post explanations; [`harness`] holds configuration, data,
//! training, evaluation and checkpoints.

pub mod embedding;
pub mod error;
pub mod explain;
pub mod gnn;
pub mod harness;
pub mod head;
pub mod kg;
pub mod model;
pub mod numerics;
pub mod text;
pub mod toy;

pub use error::{Error, Result};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/text.md")]
    mod text {}
    #[doc = include_str!("../../../book/src/knowledge-graph.md")]
    mod knowledge_graph {}
    #[doc = include_str!("../../../book/src/ordinal.md")]
    mod ordinal {}
    #[doc = include_str!("../../../book/src/explanations.md")]
    mod explanations {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
}
