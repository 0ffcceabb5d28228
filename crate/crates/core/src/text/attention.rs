use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

/// Multi-head self-attention with Q = K = V = X.
///
/// Per head `h`: `H_h = softmax(X·W_h^Q (X·W_h^K)ᵀ / √d_head) · X·W_h^V`, and the
/// layer output is `concat(H_1..H_k) · W⁰`. The per-head matrices are stored as
/// column blocks of one `d_model × d_model` matrix each for Q, K and V.
///
/// When the input width is not divisible by the head count, an input
/// projection maps it down to the largest multiple of `heads` first, and `W⁰`
/// maps back up so the output width always equals the input width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub prefix: String,
    pub d_in: usize,
    pub d_model: usize,
    pub heads: usize,
}

/// Representation plus the per-head attention distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionOutput {
    /// `n × d_in`
    pub representation: Tensor,
    /// `heads × n × n`; row `q` of head `h` is the distribution of query `q` over keys.
    pub weights: Tensor,
    /// Which positions are real (non-pad).
    pub valid: Vec<bool>,
}

impl AttentionOutput {
    pub fn heads(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    /// Attention of `query` over keys for one head.
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let n = self.valid.len();
        let start = (head * n + query) * n;
        &self.weights.data()[start..start + n]
    }
}

/// Graph nodes produced by one attention application.
pub struct AttentionNodes {
    pub output: Var,
    pub per_head: Vec<Var>,
}

impl MultiHeadAttention {
    /// Strict form: `d` must be divisible by `heads`.
    pub fn new(prefix: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {d} is not divisible by {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            prefix: prefix.to_string(),
            d_in: d,
            d_model: d,
            heads,
        })
    }

    /// Projects `d_in` down to the largest multiple of `heads` when needed.
    pub fn projected(prefix: &str, d_in: usize, heads: usize) -> Result<Self> {
        if heads == 0 || heads > d_in {
            return Err(Error::Config(format!(
                "cannot run {heads} heads over width {d_in}"
            )));
        }
        Ok(MultiHeadAttention {
            prefix: prefix.to_string(),
            d_in,
            d_model: d_in - d_in % heads,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn has_projection(&self) -> bool {
        self.d_model != self.d_in
    }

    pub fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        if self.has_projection() {
            store.init_uniform(&self.name("proj"), &[self.d_in, self.d_model], self.d_in, rng);
        }
        for part in ["wq", "wk", "wv"] {
            store.init_uniform(&self.name(part), &[self.d_model, self.d_model], self.d_model, rng);
        }
        store.init_uniform(&self.name("wo"), &[self.d_model, self.d_in], self.d_model, rng);
    }

    /// Applies attention to `x` (`n × d_in`); keys with `valid[j] == false`
    /// receive exactly zero weight.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, valid: &[bool]) -> Result<AttentionNodes> {
        let xt = g.value(x);
        let n = xt.rows();
        if xt.cols() != self.d_in {
            return Err(Error::contract(format!(
                "attention input width {} != {}",
                xt.cols(),
                self.d_in
            )));
        }
        if valid.len() != n || n == 0 {
            return Err(Error::contract(format!(
                "pad mask of length {} for {n} positions",
                valid.len()
            )));
        }
        if !valid.iter().any(|v| *v) {
            return Err(Error::contract("attention over an all-pad input"));
        }

        let x = if self.has_projection() {
            let p = g.param(store, &self.name("proj"))?;
            g.matmul(x, p)?
        } else {
            x
        };
        let wq = g.param(store, &self.name("wq"))?;
        let wk = g.param(store, &self.name("wk"))?;
        let wv = g.param(store, &self.name("wv"))?;
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;

        let all_valid = valid.iter().all(|v| *v);
        let mask = if all_valid {
            None
        } else {
            let row: Vec<f64> = valid.iter().map(|v| if *v { 1.0 } else { 0.0 }).collect();
            let data = row.iter().cycle().take(n * n).copied().collect();
            Some(g.constant(Tensor::matrix(n, n, data)?)?)
        };

        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.heads);
        let mut per_head = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (s, e) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (g.slice_cols(q, s, e)?, g.slice_cols(k, s, e)?, g.slice_cols(v, s, e)?)
            };
            let logits = g.matmul_t(qh, kh)?;
            let logits = g.scale(logits, scale)?;
            let alpha = g.weighted_softmax_rows(logits, mask)?;
            heads.push(g.matmul(alpha, vh)?);
            per_head.push(alpha);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let wo = g.param(store, &self.name("wo"))?;
        let output = g.matmul(cat, wo)?;
        Ok(AttentionNodes { output, per_head })
    }

    /// Graph-free application returning the representation and attention weights.
    pub fn apply(&self, store: &ParamStore, x: &Tensor, valid: &[bool]) -> Result<AttentionOutput> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let nodes = self.forward(&mut g, store, xv, valid)?;
        Ok(collect_output(&g, &nodes, valid))
    }
}

pub(crate) fn collect_output(g: &Graph, nodes: &AttentionNodes, valid: &[bool]) -> AttentionOutput {
    let n = valid.len();
    let mut w = Vec::with_capacity(nodes.per_head.len() * n * n);
    for h in &nodes.per_head {
        w.extend_from_slice(g.value(*h).data());
    }
    AttentionOutput {
        representation: g.value(nodes.output).clone(),
        weights: Tensor::new(vec![nodes.per_head.len(), n, n], w).expect("n×n per head"),
        valid: valid.to_vec(),
    }
}

/// Self-attention over `x` with a freshly named strict layer; `d % heads` must be 0.
pub fn multi_head_attention(
    store: &ParamStore,
    prefix: &str,
    x: &Tensor,
    heads: usize,
    valid: &[bool],
) -> Result<AttentionOutput> {
    MultiHeadAttention::new(prefix, x.cols(), heads)?.apply(store, x, valid)
}
