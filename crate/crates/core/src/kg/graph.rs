use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const GRAPH_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub entity: String,
    pub summary: String,
    pub feature: Vec<f64>,
}

/// A directed, labelled triplet `head --relation--> tail` over node indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub head: usize,
    pub relation: String,
    pub tail: usize,
}

/// Entities with sentence-embedded summaries, joined by typed triplets.
///
/// Triplets keep their direction and relation label for display. Message
/// passing sees the undirected view: each unordered node pair that carries at
/// least one triplet becomes one symmetric adjacency entry.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeGraph {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    pairs: Vec<(usize, usize)>,
    edge_pair: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct GraphFile {
    format: u32,
    feature_dim: usize,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
}

impl KnowledgeGraph {
    pub fn new(nodes: Vec<Node>, edges: Vec<Edge>) -> Result<Self> {
        let m = nodes.len();
        if m == 0 {
            return Err(Error::contract("knowledge graph has no nodes"));
        }
        let dim = nodes[0].feature.len();
        if dim == 0 {
            return Err(Error::contract("node features are empty"));
        }
        for n in &nodes {
            if n.feature.len() != dim {
                return Err(Error::contract(format!(
                    "node {:?} has feature length {}, expected {dim}",
                    n.entity,
                    n.feature.len()
                )));
            }
            if n.feature.iter().any(|x| !x.is_finite()) {
                return Err(Error::NumericDomain(format!("node {:?} has a non-finite feature", n.entity)));
            }
        }
        let mut seen = BTreeSet::new();
        let mut pair_index = BTreeMap::new();
        for e in &edges {
            if e.head >= m || e.tail >= m {
                return Err(Error::contract(format!("edge {e:?} points outside {m} nodes")));
            }
            if e.head == e.tail {
                return Err(Error::contract(format!("self-loop on node {}", e.head)));
            }
            if !seen.insert(e) {
                return Err(Error::contract(format!("duplicate edge {e:?}")));
            }
            pair_index.entry((e.head.min(e.tail), e.head.max(e.tail))).or_insert(());
        }
        let pairs: Vec<(usize, usize)> = pair_index.keys().copied().collect();
        let lookup: BTreeMap<(usize, usize), usize> = pairs.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let edge_pair = edges
            .iter()
            .map(|e| lookup[&(e.head.min(e.tail), e.head.max(e.tail))])
            .collect();
        Ok(KnowledgeGraph {
            nodes,
            edges,
            pairs,
            edge_pair,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes[0].feature.len()
    }

    /// Unordered node pairs `(i, j)`, `i < j`, in ascending order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// For each edge, the index of its pair in [`Self::pairs`].
    pub fn edge_pair(&self) -> &[usize] {
        &self.edge_pair
    }

    /// `m × feature_dim` node feature matrix.
    pub fn features(&self) -> Tensor {
        let rows: Vec<&[f64]> = self.nodes.iter().map(|n| n.feature.as_slice()).collect();
        Tensor::from_rows(&rows).expect("features validated at construction")
    }

    /// Symmetric 0/1 adjacency with a zero diagonal.
    pub fn adjacency(&self) -> Tensor {
        let m = self.node_count();
        let mut a = Tensor::zeros(&[m, m]);
        for &(i, j) in &self.pairs {
            a.data_mut()[i * m + j] = 1.0;
            a.data_mut()[j * m + i] = 1.0;
        }
        a
    }

    pub fn neighbours(&self, node: usize) -> Vec<usize> {
        self.pairs
            .iter()
            .filter_map(|&(i, j)| {
                if i == node {
                    Some(j)
                } else if j == node {
                    Some(i)
                } else {
                    None
                }
            })
            .collect()
    }

    /// Relabels nodes so old node `i` becomes `perm[i]`; edges follow their endpoints.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let m = self.node_count();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..m).collect::<Vec<_>>() {
            return Err(Error::contract("not a permutation of the node indices"));
        }
        let mut nodes = vec![None; m];
        for (old, n) in self.nodes.iter().enumerate() {
            nodes[perm[old]] = Some(n.clone());
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                head: perm[e.head],
                relation: e.relation.clone(),
                tail: perm[e.tail],
            })
            .collect();
        KnowledgeGraph::new(nodes.into_iter().map(|n| n.expect("permutation")).collect(), edges)
    }

    /// Same nodes, keeping only the edges whose indices are listed.
    pub fn with_edges(&self, keep: &[usize]) -> Result<Self> {
        let edges = keep
            .iter()
            .map(|&i| {
                self.edges
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::contract(format!("edge index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        KnowledgeGraph::new(self.nodes.clone(), edges)
    }

    pub fn to_json(&self) -> Result<String> {
        let file = GraphFile {
            format: GRAPH_FORMAT,
            feature_dim: self.feature_dim(),
            nodes: self.nodes.clone(),
            edges: self.edges.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        if file.format != GRAPH_FORMAT {
            return Err(Error::Validation(format!(
                "graph format {} is not supported (expected {GRAPH_FORMAT})",
                file.format
            )));
        }
        let g = KnowledgeGraph::new(file.nodes, file.edges)?;
        if g.feature_dim() != file.feature_dim {
            return Err(Error::Validation(format!(
                "graph declares feature_dim {} but nodes have {}",
                file.feature_dim,
                g.feature_dim()
            )));
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        Self::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(name: &str, f: Vec<f64>) -> Node {
        Node {
            entity: name.into(),
            summary: format!("{name} summary"),
            feature: f,
        }
    }

    fn edge(h: usize, r: &str, t: usize) -> Edge {
        Edge {
            head: h,
            relation: r.into(),
            tail: t,
        }
    }

    fn triangle() -> KnowledgeGraph {
        KnowledgeGraph::new(
            vec![node("a", vec![1.0, 0.0]), node("b", vec![0.0, 1.0]), node("c", vec![1.0, 1.0])],
            vec![edge(0, "r", 1), edge(1, "s", 0), edge(2, "r", 0)],
        )
        .unwrap()
    }

    #[test]
    fn pairs_merge_both_directions() {
        let g = triangle();
        assert_eq!(g.pairs(), &[(0, 1), (0, 2)]);
        assert_eq!(g.edge_pair(), &[0, 0, 1]);
        let a = g.adjacency();
        for i in 0..3 {
            assert_eq!(a.at(i, i), 0.0);
            for j in 0..3 {
                assert_eq!(a.at(i, j), a.at(j, i));
            }
        }
        assert_eq!(a.at(1, 2), 0.0);
        assert_eq!(g.neighbours(0), vec![1, 2]);
    }

    #[test]
    fn rejects_bad_edges() {
        let n = vec![node("a", vec![1.0]), node("b", vec![2.0])];
        assert!(KnowledgeGraph::new(n.clone(), vec![edge(0, "r", 0)]).is_err());
        assert!(KnowledgeGraph::new(n.clone(), vec![edge(0, "r", 2)]).is_err());
        assert!(KnowledgeGraph::new(n.clone(), vec![edge(0, "r", 1), edge(0, "r", 1)]).is_err());
        assert!(KnowledgeGraph::new(n, vec![edge(0, "r", 1), edge(0, "q", 1)]).is_ok());
        assert!(KnowledgeGraph::new(vec![], vec![]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let g = triangle();
        let back = KnowledgeGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
        let bumped = g.to_json().unwrap().replace("\"format\": 1", "\"format\": 2");
        assert!(matches!(KnowledgeGraph::from_json(&bumped), Err(Error::Validation(_))));
    }

    #[test]
    fn permutation_moves_edges_with_nodes() {
        let g = triangle();
        let p = g.permuted(&[2, 0, 1]).unwrap();
        assert_eq!(p.nodes()[2].entity, "a");
        assert_eq!(p.edges()[0], edge(2, "r", 0));
        assert!(g.permuted(&[0, 0, 1]).is_err());
    }
}
