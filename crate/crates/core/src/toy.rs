//! Small deterministic fixtures for tests, examples and the guide.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::embedding::{Embedders, SentenceEmbedder, WordEmbedder};
use crate::error::Result;
use crate::gnn::{GnnConfig, KgEncoder};
use crate::kg::{Edge, KnowledgeGraph, Node};
use crate::model::ModelConfig;
use crate::numerics::ParamStore;
use crate::text::{EmbeddedPost, TextEncoderConfig, TokenizedPost};

/// A model whose every width is `width`, with two heads at both levels.
pub fn tiny_model_config(width: usize, classes: usize) -> ModelConfig {
    ModelConfig {
        text: TextEncoderConfig {
            word_dim: width,
            sentence_dim: width,
            hidden: width,
            heads: 2,
            max_tokens: 8,
            max_sentences: 4,
            pad_to_max: false,
        },
        gnn: GnnConfig {
            in_dim: width,
            hidden: width,
            gat_heads: 2,
            leaky_slope: 0.2,
        },
        classes,
        beta: 3.0,
        head_hidden: width,
        dropout: 0.0,
    }
}

pub fn tiny_embedders(width: usize, seed: u64) -> Embedders {
    Embedders {
        words: WordEmbedder::synthetic(width, seed),
        sentences: SentenceEmbedder::synthetic(width, seed),
    }
}

/// Tokenizes and embeds `(text, label)` pairs as `toy-0`, `toy-1`, ...
pub fn embed_texts(texts: &[(&str, usize)], emb: &Embedders, max_sentences: usize, max_tokens: usize) -> Result<Vec<EmbeddedPost>> {
    texts
        .iter()
        .enumerate()
        .map(|(i, (text, label))| {
            let t = TokenizedPost::new(format!("toy-{i}"), text, Some(*label), max_sentences, max_tokens)?;
            EmbeddedPost::from_tokenized(&t, emb)
        })
        .collect()
}

fn node(i: usize, feature: Vec<f64>) -> Node {
    Node {
        entity: format!("n{i}"),
        summary: format!("entity {i}"),
        feature,
    }
}

/// `nodes` nodes with uniform features in [-1, 1]; each unordered pair is
/// joined with probability `density`.
pub fn random_graph<R: Rng + ?Sized>(nodes: usize, dim: usize, density: f64, rng: &mut R) -> Result<KnowledgeGraph> {
    let ns = (0..nodes)
        .map(|i| node(i, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let mut edges = Vec::new();
    for a in 0..nodes {
        for b in a + 1..nodes {
            if rng.random::<f64>() < density {
                let (head, tail) = if rng.random::<bool>() { (a, b) } else { (b, a) };
                edges.push(Edge {
                    head,
                    relation: "related_to".into(),
                    tail,
                });
            }
        }
    }
    KnowledgeGraph::new(ns, edges)
}

/// The five-node, `dim`-wide graph used for gradient checks.
pub fn five_node_graph(dim: usize, seed: u64) -> Result<KnowledgeGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ns = (0..5)
        .map(|i| node(i, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2)]
        .into_iter()
        .map(|(head, tail)| Edge {
            head,
            relation: "related_to".into(),
            tail,
        })
        .collect();
    KnowledgeGraph::new(ns, edges)
}

/// A graph in which exactly one edge moves the pooled representation, with
/// the KG encoder that makes it so.
#[derive(Clone, Debug)]
pub struct SingleEdgeFixture {
    pub graph: KnowledgeGraph,
    pub informative: usize,
    pub encoder: KgEncoder,
    pub params: ParamStore,
}

/// Two featured nodes joined by one edge, plus `quiet` zero-feature nodes
/// wired in a ring among themselves. The encoder has zero biases, so zero
/// states stay zero and the quiet edges cannot move `g`. Its first GIN weight
/// is scaled by `gain`, which (the encoder being positively homogeneous)
/// scales `g` without changing what the edge scorer sees.
pub fn single_informative_edge(dim: usize, quiet: usize, gain: f64, seed: u64) -> Result<SingleEdgeFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ns = Vec::new();
    for i in 0..2 {
        ns.push(node(i, (0..dim).map(|_| rng.random_range(1.0..3.0)).collect()));
    }
    for i in 0..quiet {
        ns.push(node(2 + i, vec![0.0; dim]));
    }
    let mut pairs: Vec<(usize, usize)> = (0..quiet.saturating_sub(1)).map(|i| (2 + i, 3 + i)).collect();
    if quiet > 2 {
        pairs.push((2, 1 + quiet));
    }
    // Mid-list, so neither tie-break direction lands on it by accident.
    let informative = pairs.len() / 2;
    pairs.insert(informative, (0, 1));
    let edges = pairs
        .into_iter()
        .map(|(head, tail)| Edge {
            head,
            relation: "related_to".into(),
            tail,
        })
        .collect();
    let encoder = KgEncoder::new(GnnConfig {
        in_dim: dim,
        hidden: 8,
        gat_heads: 2,
        leaky_slope: 0.2,
    })?;
    let mut params = ParamStore::new();
    encoder.init(&mut params, &mut rng);
    zero_biases(&mut params);
    if let Some(w) = params.get_mut(&encoder.gin[0].mlp[0].weight) {
        w.data_mut().iter_mut().for_each(|v| *v *= gain);
    }
    Ok(SingleEdgeFixture {
        graph: KnowledgeGraph::new(ns, edges)?,
        informative,
        encoder,
        params,
    })
}

/// Sets every parameter whose name ends in `.bias` to zero.
pub fn zero_biases(store: &mut ParamStore) {
    for (name, t) in store.iter_mut() {
        if name.ends_with(".bias") {
            t.data_mut().fill(0.0);
        }
    }
}
