//! Knowledge-graph encoder: two GIN layers, one multi-head GAT layer, max-pool readout.
//!
//! Every stage accepts an optional per-edge mask in `[0, 1]`. An unordered node
//! pair carrying several triplets uses the largest mask among them. In GIN the
//! mask scales the neighbour's contribution to the sum; in GAT it multiplies
//! the unnormalized attention weight, which equals adding `ln(mask)` to the
//! logit. A mask of zero removes the neighbour exactly, and a mask of one is the
//! unmasked graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::KnowledgeGraph;
use crate::numerics::{Activation, FeedForward, Graph, ParamStore, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    /// Node feature width.
    pub in_dim: usize,
    pub hidden: usize,
    pub gat_heads: usize,
    pub leaky_slope: f64,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            in_dim: crate::embedding::SENTENCE_DIM,
            hidden: 128,
            gat_heads: 2,
            leaky_slope: 0.2,
        }
    }
}

/// `h_v ← MLP((1 + ε)·h_v + Σ_{u ∈ N(v)} h_u)` with a two-layer ReLU MLP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GinLayer {
    pub epsilon: String,
    pub mlp: [FeedForward; 2],
}

impl GinLayer {
    pub fn new(prefix: &str, d_in: usize, hidden: usize) -> Self {
        GinLayer {
            epsilon: format!("{prefix}.epsilon"),
            mlp: [
                FeedForward::new(&format!("{prefix}.mlp0"), d_in, hidden, Activation::Relu),
                FeedForward::new(&format!("{prefix}.mlp1"), hidden, hidden, Activation::Relu),
            ],
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(&self.epsilon, Tensor::vector(vec![0.0]));
        for l in &self.mlp {
            l.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, msg: &Messages) -> Result<Var> {
        let eps = g.param(store, &self.epsilon)?;
        let one = g.constant(Tensor::vector(vec![1.0]))?;
        let w = g.add(one, eps)?;
        let mut x = g.mul_scalar(h, w)?;
        if let Some(adj) = msg.adjacency {
            let nb = g.matmul(adj, h)?;
            x = g.add(x, nb)?;
        }
        let x = self.mlp[0].forward(g, store, x)?;
        self.mlp[1].forward(g, store, x)
    }
}

/// Multi-head graph attention with head averaging and ELU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatLayer {
    pub prefix: String,
    pub dim: usize,
    pub heads: usize,
    pub leaky_slope: f64,
}

impl GatLayer {
    pub fn new(prefix: &str, dim: usize, heads: usize, leaky_slope: f64) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("GAT needs at least one head".into()));
        }
        Ok(GatLayer {
            prefix: prefix.to_string(),
            dim,
            heads,
            leaky_slope,
        })
    }

    pub fn theta(&self, k: usize) -> String {
        format!("{}.theta{k}", self.prefix)
    }

    pub fn attention(&self, k: usize) -> String {
        format!("{}.att{k}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for k in 0..self.heads {
            store.init_uniform(&self.theta(k), &[self.dim, self.dim], self.dim, rng);
            store.init_uniform(&self.attention(k), &[2 * self.dim, 1], 2 * self.dim, rng);
        }
    }

    /// Returns the layer output and each head's `m × m` attention matrix.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, h: Var, msg: &Messages) -> Result<(Var, Vec<Var>)> {
        let d = self.dim;
        let mut outs = Vec::with_capacity(self.heads);
        let mut alphas = Vec::with_capacity(self.heads);
        for k in 0..self.heads {
            let theta = g.param(store, &self.theta(k))?;
            let a = g.param(store, &self.attention(k))?;
            let z = g.matmul(h, theta)?;
            let a_src = g.slice_rows(a, 0, d)?;
            let a_dst = g.slice_rows(a, d, 2 * d)?;
            let s = g.matmul(z, a_src)?;
            let t = g.matmul(z, a_dst)?;
            let logits = g.outer_sum(s, t)?;
            let logits = g.leaky_relu(logits, self.leaky_slope)?;
            let alpha = g.weighted_softmax_rows(logits, Some(msg.attention_weights))?;
            outs.push(g.matmul(alpha, z)?);
            alphas.push(alpha);
        }
        let mut sum = outs[0];
        for o in &outs[1..] {
            sum = g.add(sum, *o)?;
        }
        let mean = g.scale(sum, 1.0 / self.heads as f64)?;
        Ok((g.elu(mean)?, alphas))
    }
}

/// Message-passing structure for one graph, shared by every layer.
pub struct Messages {
    /// Symmetric weighted adjacency with zero diagonal; `None` for an edgeless graph.
    pub adjacency: Option<Var>,
    /// `I + adjacency`: self-loop always weighted 1.
    pub attention_weights: Var,
}

impl Messages {
    pub fn new(g: &mut Graph, graph: &KnowledgeGraph, edge_mask: Option<Var>) -> Result<Self> {
        let m = graph.node_count();
        let eye = g.constant(Tensor::identity(m))?;
        let adjacency = match edge_mask {
            _ if graph.edge_count() == 0 => {
                if let Some(mask) = edge_mask {
                    check_mask_len(g.value(mask).len(), 0)?;
                }
                None
            }
            None => Some(g.constant(graph.adjacency())?),
            Some(mask) => {
                check_mask_len(g.value(mask).len(), graph.edge_count())?;
                if g.value(mask).data().iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err(Error::contract("edge mask entries must lie in [0, 1]"));
                }
                let per_pair = g.group_max(mask, graph.edge_pair(), graph.pairs().len())?;
                Some(g.scatter_pairs(per_pair, graph.pairs(), m)?)
            }
        };
        let attention_weights = match adjacency {
            Some(a) => g.add(eye, a)?,
            None => eye,
        };
        Ok(Messages {
            adjacency,
            attention_weights,
        })
    }
}

fn check_mask_len(got: usize, edges: usize) -> Result<()> {
    if got != edges {
        return Err(Error::contract(format!("edge mask of length {got} for {edges} edges")));
    }
    Ok(())
}

/// Column-wise max over node rows.
pub fn readout(g: &mut Graph, h: Var) -> Result<Var> {
    g.max_rows(h)
}

/// Graph handles from one encoder pass.
pub struct KgNodes {
    pub g: Var,
    pub node_states: Var,
    pub gat_attention: Vec<Var>,
}

/// GIN → GIN → GAT → max readout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KgEncoder {
    pub config: GnnConfig,
    pub gin: [GinLayer; 2],
    pub gat: GatLayer,
}

impl KgEncoder {
    pub fn new(config: GnnConfig) -> Result<Self> {
        if config.in_dim == 0 || config.hidden == 0 {
            return Err(Error::Config("GNN widths must be positive".into()));
        }
        let gin = [
            GinLayer::new("kg.gin0", config.in_dim, config.hidden),
            GinLayer::new("kg.gin1", config.hidden, config.hidden),
        ];
        let gat = GatLayer::new("kg.gat", config.hidden, config.gat_heads, config.leaky_slope)?;
        Ok(KgEncoder { config, gin, gat })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in &self.gin {
            l.init(store, rng);
        }
        self.gat.init(store, rng);
    }

    pub fn output_dim(&self) -> usize {
        self.config.hidden
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, graph: &KnowledgeGraph, edge_mask: Option<Var>) -> Result<KgNodes> {
        if graph.feature_dim() != self.config.in_dim {
            return Err(Error::contract(format!(
                "graph features have width {}, encoder expects {}",
                graph.feature_dim(),
                self.config.in_dim
            )));
        }
        let msg = Messages::new(g, graph, edge_mask)?;
        let h0 = g.constant(graph.features())?;
        let h1 = self.gin[0].forward(g, store, h0, &msg)?;
        let h2 = self.gin[1].forward(g, store, h1, &msg)?;
        let (h3, gat_attention) = self.gat.forward(g, store, h2, &msg)?;
        let pooled = readout(g, h3)?;
        Ok(KgNodes {
            g: pooled,
            node_states: h3,
            gat_attention,
        })
    }

    /// Graph-free `g` (`1 × hidden`) with an optional per-edge mask.
    pub fn encode(&self, store: &ParamStore, graph: &KnowledgeGraph, edge_mask: Option<&[f64]>) -> Result<Tensor> {
        let mut g = Graph::new();
        let mask = edge_mask
            .map(|m| g.constant(Tensor::vector(m.to_vec())))
            .transpose()?;
        let nodes = self.forward(&mut g, store, graph, mask)?;
        Ok(g.value(nodes.g).clone())
    }

    /// Per-head GAT attention matrices (`m × m`, row = target node).
    pub fn gat_attention(&self, store: &ParamStore, graph: &KnowledgeGraph) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let nodes = self.forward(&mut g, store, graph, None)?;
        Ok(nodes.gat_attention.iter().map(|a| g.value(*a).clone()).collect())
    }
}

/// Standalone GIN pass over the graph's features.
pub fn gin_forward(
    store: &ParamStore,
    graph: &KnowledgeGraph,
    h: &Tensor,
    layer: &GinLayer,
    edge_mask: Option<&[f64]>,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let mask = edge_mask.map(|m| g.constant(Tensor::vector(m.to_vec()))).transpose()?;
    let msg = Messages::new(&mut g, graph, mask)?;
    check_rows(h, graph)?;
    let hv = g.constant(h.clone())?;
    let out = layer.forward(&mut g, store, hv, &msg)?;
    Ok(g.value(out).clone())
}

/// Standalone GAT pass; returns the output and the per-head attention.
pub fn gat_forward(
    store: &ParamStore,
    graph: &KnowledgeGraph,
    h: &Tensor,
    layer: &GatLayer,
    edge_mask: Option<&[f64]>,
) -> Result<(Tensor, Vec<Tensor>)> {
    let mut g = Graph::new();
    let mask = edge_mask.map(|m| g.constant(Tensor::vector(m.to_vec()))).transpose()?;
    let msg = Messages::new(&mut g, graph, mask)?;
    check_rows(h, graph)?;
    let hv = g.constant(h.clone())?;
    let (out, alphas) = layer.forward(&mut g, store, hv, &msg)?;
    Ok((g.value(out).clone(), alphas.iter().map(|a| g.value(*a).clone()).collect()))
}

fn check_rows(h: &Tensor, graph: &KnowledgeGraph) -> Result<()> {
    if h.rows() != graph.node_count() {
        return Err(Error::contract(format!(
            "{} feature rows for {} nodes",
            h.rows(),
            graph.node_count()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{Edge, Node};
    use crate::numerics::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn graph(features: Vec<Vec<f64>>, edges: &[(usize, usize)]) -> KnowledgeGraph {
        let nodes = features
            .into_iter()
            .enumerate()
            .map(|(i, f)| Node {
                entity: format!("n{i}"),
                summary: format!("node {i}"),
                feature: f,
            })
            .collect();
        let edges = edges
            .iter()
            .map(|&(h, t)| Edge {
                head: h,
                relation: "rel".into(),
                tail: t,
            })
            .collect();
        KnowledgeGraph::new(nodes, edges).unwrap()
    }

    fn identity_gin(d: usize) -> (GinLayer, ParamStore) {
        let l = GinLayer::new("gin", d, d);
        let mut s = ParamStore::new();
        s.insert(&l.epsilon, Tensor::vector(vec![0.0]));
        for f in &l.mlp {
            s.insert(&f.weight, Tensor::identity(d));
            s.insert(&f.bias, Tensor::vector(vec![0.0; d]));
        }
        (l, s)
    }

    fn small_encoder(seed: u64, in_dim: usize) -> (KgEncoder, ParamStore) {
        let enc = KgEncoder::new(GnnConfig {
            in_dim,
            hidden: 4,
            gat_heads: 2,
            leaky_slope: 0.2,
        })
        .unwrap();
        let mut s = ParamStore::new();
        enc.init(&mut s, &mut ChaCha8Rng::seed_from_u64(seed));
        (enc, s)
    }

    fn random_graph(m: usize, d: usize, edges: &[(usize, usize)], seed: u64) -> KnowledgeGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::uniform(&[m, d], 1.0, &mut rng);
        graph((0..m).map(|i| f.row(i).to_vec()).collect(), edges)
    }

    #[test]
    fn gin_with_identity_mlp() {
        let (l, s) = identity_gin(2);
        let g = graph(vec![vec![1.0, 2.0], vec![3.0, 0.5], vec![0.25, 4.0]], &[(0, 1)]);
        let out = gin_forward(&s, &g, &g.features(), &l, None).unwrap();
        assert_eq!(out.row(0), &[4.0, 2.5]);
        assert_eq!(out.row(1), &[4.0, 2.5]);
        assert_eq!(out.row(2), &[0.25, 4.0]);
    }

    #[test]
    fn zero_mask_equals_edgeless_graph() {
        let (enc, s) = small_encoder(1, 3);
        let g = random_graph(4, 3, &[(0, 1), (1, 2), (3, 0)], 2);
        let bare = g.with_edges(&[]).unwrap();
        let masked = enc.encode(&s, &g, Some(&[0.0; 3])).unwrap();
        let edgeless = enc.encode(&s, &bare, None).unwrap();
        assert!(masked.max_abs_diff(&edgeless) < 1e-12);
        let ones = enc.encode(&s, &g, Some(&[1.0; 3])).unwrap();
        let plain = enc.encode(&s, &g, None).unwrap();
        assert_eq!(ones, plain);
        assert!(enc.encode(&s, &g, Some(&[1.0; 2])).is_err());
    }

    #[test]
    fn gat_attention_is_a_distribution_over_neighbourhood() {
        let (enc, s) = small_encoder(3, 4);
        let g = random_graph(5, 4, &[(0, 1), (1, 2), (2, 0), (3, 4)], 4);
        let h = Tensor::uniform(&[5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let (_, alphas) = gat_forward(&s, &g, &h, &enc.gat, None).unwrap();
        let adj = g.adjacency();
        for a in &alphas {
            for i in 0..5 {
                let row = a.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for j in 0..5 {
                    if i != j && adj.at(i, j) == 0.0 {
                        assert_eq!(row[j], 0.0);
                    }
                }
            }
        }
        let lonely = random_graph(2, 4, &[], 6);
        let h = Tensor::uniform(&[2, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(7));
        let (_, alphas) = gat_forward(&s, &lonely, &h, &enc.gat, None).unwrap();
        for a in alphas {
            assert_eq!(a.data(), &[1.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn identical_neighbours_share_attention_evenly() {
        let (enc, s) = small_encoder(8, 4);
        let g = random_graph(3, 4, &[(0, 1), (0, 2)], 9);
        let row = vec![0.3, -0.2, 0.5, 0.1];
        let h = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let (_, alphas) = gat_forward(&s, &g, &h, &enc.gat, None).unwrap();
        for a in alphas {
            for j in 0..3 {
                assert!((a.at(0, j) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn readout_examples() {
        let mut g = Graph::new();
        let h = g.constant(Tensor::from_rows(&[vec![1.0, 5.0], vec![3.0, 2.0]]).unwrap()).unwrap();
        let r = readout(&mut g, h).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 5.0]);
    }

    #[test]
    fn permutation_invariance() {
        let (enc, s) = small_encoder(10, 3);
        let g = random_graph(5, 3, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3)], 11);
        let base = enc.encode(&s, &g, None).unwrap();
        let p = g.permuted(&[3, 0, 4, 1, 2]).unwrap();
        let moved = enc.encode(&s, &p, None).unwrap();
        assert!(base.max_abs_diff(&moved) <= 1e-9);
    }

    #[test]
    fn single_zero_node_matches_hand_composition() {
        let d = 3;
        let enc = KgEncoder::new(GnnConfig {
            in_dim: d,
            hidden: d,
            gat_heads: 2,
            leaky_slope: 0.2,
        })
        .unwrap();
        let mut s = ParamStore::new();
        enc.init(&mut s, &mut ChaCha8Rng::seed_from_u64(12));
        for l in &enc.gin {
            for f in &l.mlp {
                s.insert(&f.weight, Tensor::identity(d));
                s.insert(&f.bias, Tensor::vector(vec![0.2, -0.4, 0.7]));
            }
        }
        let g = graph(vec![vec![0.0; d]], &[]);
        let out = enc.encode(&s, &g, None).unwrap();

        // Oracle: with one node, GIN is relu(relu(h + b) + b) twice, the GAT
        // attends only to itself, and the readout is the single row.
        let b: [f64; 3] = [0.2, -0.4, 0.7];
        let mut h: Vec<f64> = vec![0.0; d];
        for _ in 0..4 {
            h = h.iter().zip(&b).map(|(x, y)| (x + y).max(0.0)).collect();
        }
        let mut mean = vec![0.0; d];
        for k in 0..2 {
            let theta = s.get(&enc.gat.theta(k)).unwrap();
            for c in 0..d {
                mean[c] += (0..d).map(|r| h[r] * theta.at(r, c)).sum::<f64>() / 2.0;
            }
        }
        let expect: Vec<f64> = mean.iter().map(|x| if *x > 0.0 { *x } else { x.exp_m1() }).collect();
        for c in 0..d {
            assert!((out.data()[c] - expect[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (enc, s) = small_encoder(13, 3);
        let g = random_graph(5, 3, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 3)], 14);
        let report = check_gradients(
            |gr, st| {
                let n = enc.forward(gr, st, &g, None)?;
                let sq = gr.mul(n.g, n.g)?;
                gr.sum(sq)
            },
            &s,
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error <= 1e-4, "{report:?}");
    }
}
