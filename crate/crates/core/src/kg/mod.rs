//! The domain knowledge graph: triplet ingestion, symptom filtering and the graph file format.

mod build;
mod graph;

pub use build::{
    cosine, filter_by_symptoms, ingest_triplets, parse_triplets, RawTriplet, SymptomEntry, SymptomLexicon,
    DEFAULT_THRESHOLD,
};
pub use graph::{Edge, KnowledgeGraph, Node, GRAPH_FORMAT};
