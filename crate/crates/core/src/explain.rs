//! Explanations: attention-ranked sentences and words, and the KG subgraph
//! whose encoding stays closest to the full graph's.
//!
//! The subgraph search relaxes edge membership to a soft mask
//! `sigmoid(W_y·[f_head ⊕ f_tail] + b_y)` and trains only `W_y, b_y` to minimize
//! `smooth_l1(g(G), g(G ⊙ mask)) + λ·mean(mask)`. The hard subgraph is then the
//! top-K edges by score.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::KgEncoder;
use crate::kg::KnowledgeGraph;
use crate::model::SeverityModel;
use crate::numerics::{smooth_l1, stable_sigmoid, Activation, Adam, FeedForward, Graph, ParamStore, Tensor};
use crate::text::{AttentionOutput, Blocks, EmbeddedPost};

/// Linear edge scorer over concatenated endpoint features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScorer {
    pub layer: FeedForward,
}

impl EdgeScorer {
    pub fn new(feature_dim: usize) -> Self {
        EdgeScorer {
            layer: FeedForward::new("explainer", 2 * feature_dim, 1, Activation::Identity),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.layer.init(store, rng);
    }

    pub fn initialized<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut s = ParamStore::new();
        self.init(&mut s, rng);
        s
    }
}

/// One row per edge: head feature, then tail feature.
pub fn edge_embeddings(graph: &KnowledgeGraph) -> Result<Tensor> {
    let d = graph.feature_dim();
    let mut data = Vec::with_capacity(graph.edge_count() * 2 * d);
    for e in graph.edges() {
        data.extend_from_slice(&graph.nodes()[e.head].feature);
        data.extend_from_slice(&graph.nodes()[e.tail].feature);
    }
    Tensor::matrix(graph.edge_count(), 2 * d, data)
}

/// Raw (pre-sigmoid) score per edge.
pub fn score_edges(graph: &KnowledgeGraph, scorer: &EdgeScorer, store: &ParamStore) -> Result<Vec<f64>> {
    if graph.edge_count() == 0 {
        return Ok(Vec::new());
    }
    Ok(scorer.layer.apply(store, &edge_embeddings(graph)?)?.into_data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplainerConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Weight λ of the mean-mask sparsity term.
    pub sparsity: f64,
    /// Smooth L1 transition point δ.
    pub delta: f64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            epochs: 100,
            lr: 0.01,
            sparsity: 0.01,
            delta: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExplainerRun {
    /// Scorer parameters at the lowest loss seen (the initial state included).
    pub store: ParamStore,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub losses: Vec<f64>,
}

/// Trains `scorer` against the frozen KG encoder. Only the scorer's parameters change.
pub fn train_explainer(
    graph: &KnowledgeGraph,
    encoder: &KgEncoder,
    model: &ParamStore,
    scorer: &EdgeScorer,
    init: ParamStore,
    config: &ExplainerConfig,
) -> Result<ExplainerRun> {
    if config.sparsity < 0.0 || config.lr <= 0.0 || config.delta <= 0.0 {
        return Err(Error::Config("explainer lr and delta must be positive, sparsity non-negative".into()));
    }
    let target = encoder.encode(model, graph, None)?;
    let mut store = init;
    if graph.edge_count() == 0 {
        return Ok(ExplainerRun {
            store,
            initial_loss: 0.0,
            best_loss: 0.0,
            losses: vec![0.0],
        });
    }
    let rows = edge_embeddings(graph)?;
    let step = |store: &ParamStore| -> Result<(f64, crate::numerics::Gradients)> {
        let mut g = Graph::new();
        let x = g.constant(rows.clone())?;
        let scores = scorer.layer.forward(&mut g, store, x)?;
        let mask = g.sigmoid(scores)?;
        let masked = encoder.forward(&mut g, model, graph, Some(mask))?.g;
        let t = g.constant(target.clone())?;
        let fid = g.smooth_l1(masked, t, config.delta)?;
        let size = g.mean(mask)?;
        let reg = g.scale(size, config.sparsity)?;
        let loss = g.add(fid, reg)?;
        Ok((g.value(loss).item()?, g.backward(loss)?))
    };

    let mut adam = Adam::new(config.lr);
    let mut losses = Vec::with_capacity(config.epochs + 1);
    let (initial_loss, mut grads) = step(&store)?;
    losses.push(initial_loss);
    let mut best = (initial_loss, store.clone());
    for epoch in 0..config.epochs {
        adam.step(&mut store, &grads);
        let (loss, g) = match step(&store) {
            Ok(r) => r,
            Err(Error::NumericDomain(msg)) => {
                return Err(Error::Training(format!(
                    "explainer diverged at epoch {epoch} ({msg}); last finite loss {:.6e}",
                    losses.last().copied().unwrap_or(initial_loss)
                )))
            }
            Err(e) => return Err(e),
        };
        losses.push(loss);
        if loss < best.0 {
            best = (loss, store.clone());
        }
        grads = g;
    }
    Ok(ExplainerRun {
        store: best.1,
        initial_loss,
        best_loss: best.0,
        losses,
    })
}

/// Hard top-K edge selection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Subgraph {
    /// Selected edge ids, highest score first.
    pub edges: Vec<usize>,
    /// Score of every edge in the original graph.
    pub scores: Vec<f64>,
    pub k: usize,
}

impl Subgraph {
    /// 0/1 membership per original edge.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.scores.len()];
        for &e in &self.edges {
            m[e] = 1.0;
        }
        m
    }

    /// Edge ids left out of the subgraph, ascending.
    pub fn complement(&self) -> Vec<usize> {
        let mask = self.mask();
        (0..mask.len()).filter(|e| mask[*e] == 0.0).collect()
    }

    /// Endpoint nodes of the selected edges, ascending.
    pub fn nodes(&self, graph: &KnowledgeGraph) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .edges
            .iter()
            .flat_map(|&e| [graph.edges()[e].head, graph.edges()[e].tail])
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Keeps the `min(top_k, |E|)` highest-scoring edges, ties broken by edge id.
pub fn extract_subgraph(scores: &[f64], top_k: usize) -> Result<Subgraph> {
    if top_k == 0 {
        return Err(Error::Validation("top-k must be at least 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NumericDomain("non-finite edge score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(top_k.min(scores.len()));
    Ok(Subgraph {
        edges: order,
        scores: scores.to_vec(),
        k: top_k,
    })
}

/// `smooth_l1(g(G), g(G restricted to the mask))`, evaluated with a hard mask.
pub fn fidelity_loss(
    graph: &KnowledgeGraph,
    encoder: &KgEncoder,
    model: &ParamStore,
    mask: &[f64],
    delta: f64,
) -> Result<f64> {
    let full = encoder.encode(model, graph, None)?;
    let part = encoder.encode(model, graph, Some(mask))?;
    smooth_l1(&part, &full, delta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub index: usize,
    pub mass: f64,
}

/// Attention received by each real key position, averaged over heads and real
/// query positions, renormalized, and sorted by mass (ties by position).
pub fn rank_positions(attention: &AttentionOutput) -> Vec<Ranked> {
    let n = attention.len();
    let real: Vec<usize> = (0..n).filter(|i| attention.valid[*i]).collect();
    let mut mass = vec![0.0; n];
    for h in 0..attention.heads() {
        for &q in &real {
            for (k, w) in attention.row(h, q).iter().enumerate() {
                mass[k] += w;
            }
        }
    }
    let total: f64 = real.iter().map(|k| mass[*k]).sum();
    let mut out: Vec<Ranked> = real
        .iter()
        .map(|&k| Ranked {
            index: k,
            mass: if total > 0.0 { mass[k] / total } else { 1.0 / real.len() as f64 },
        })
        .collect();
    out.sort_by(|a, b| b.mass.total_cmp(&a.mass).then(a.index.cmp(&b.index)));
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenMass {
    pub token: String,
    pub mass: f64,
}

/// Tokens of one sentence ranked by the attention they receive.
pub fn rank_tokens(attention: &AttentionOutput, tokens: &[String]) -> Result<Vec<TokenMass>> {
    let real = attention.valid.iter().filter(|v| **v).count();
    if real != tokens.len() {
        return Err(Error::contract(format!("{} tokens for {real} attended positions", tokens.len())));
    }
    Ok(rank_positions(attention)
        .into_iter()
        .map(|r| TokenMass {
            token: tokens[r.index].clone(),
            mass: r.mass,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictedClass {
    pub class: String,
    pub rank: usize,
    pub probabilities: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceExplanation {
    pub index: usize,
    pub mass: f64,
    pub tokens: Vec<TokenMass>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphEdge {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgraphExplanation {
    pub edges: Vec<SubgraphEdge>,
    pub k: usize,
}

impl SubgraphExplanation {
    pub fn new(graph: &KnowledgeGraph, sub: &Subgraph) -> Self {
        let edges = sub
            .edges
            .iter()
            .map(|&e| {
                let edge = &graph.edges()[e];
                SubgraphEdge {
                    head: graph.nodes()[edge.head].entity.clone(),
                    relation: edge.relation.clone(),
                    tail: graph.nodes()[edge.tail].entity.clone(),
                    score: sub.scores[e],
                }
            })
            .collect();
        SubgraphExplanation { edges, k: sub.k }
    }
}

/// Per-post explanation. Sentences are ranked by attention mass and each
/// carries its own ranked tokens; the subgraph is shared by every post.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExplanationBundle {
    pub post_id: String,
    pub predicted: PredictedClass,
    pub sentences: Vec<SentenceExplanation>,
    pub subgraph: SubgraphExplanation,
}

pub fn explain_post(
    model: &SeverityModel,
    store: &ParamStore,
    post: &EmbeddedPost,
    kg: &Tensor,
    blocks: Blocks,
    subgraph: &SubgraphExplanation,
) -> Result<ExplanationBundle> {
    let inf = model.infer(store, post, kg, blocks)?;
    let sentences = rank_positions(&inf.sentences)
        .into_iter()
        .map(|r| {
            Ok(SentenceExplanation {
                index: r.index,
                mass: r.mass,
                tokens: rank_tokens(&inf.words[r.index], &post.tokens[r.index])?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let rank = inf.prediction.predicted_rank;
    Ok(ExplanationBundle {
        post_id: post.id.clone(),
        predicted: PredictedClass {
            class: model.scale.label(rank).unwrap_or_default().to_string(),
            rank,
            probabilities: inf.prediction.probabilities,
        },
        sentences,
        subgraph: subgraph.clone(),
    })
}

/// Soft mask values for raw scores.
pub fn soft_mask(scores: &[f64]) -> Vec<f64> {
    scores.iter().map(|s| stable_sigmoid(*s)).collect()
}
