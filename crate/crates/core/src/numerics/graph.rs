//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every primitive applied during one forward pass. Nodes
//! are appended in evaluation order, so the tape is already topologically
//! sorted and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters enter the tape through [`Graph::param`], which pulls a named
//! tensor out of a [`ParamStore`]. Requesting the same name twice returns the
//! same node, so gradients of shared parameters accumulate naturally. Constants
//! (inputs, masks, targets) enter through [`Graph::constant`] and never receive
//! gradients.
//!
//! ```
//! use sevex::numerics::{Graph, ParamStore, Tensor};
//!
//! let mut store = ParamStore::new();
//! store.insert("x", Tensor::vector(vec![3.0]));
//! let mut g = Graph::new();
//! let x = g.param(&store, "x").unwrap();
//! let sq = g.mul(x, x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get("x").unwrap().data(), &[6.0]);
//! ```

use std::collections::{BTreeMap, HashMap};

use super::params::ParamStore;
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Elu,
    Identity,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Relu(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    LnClamped(Var, f64),
    /// Row-wise `α_ij = w_ij·exp(l_ij) / Σ_k w_ik·exp(l_ik)`; `None` means all weights 1.
    WeightedSoftmax {
        logits: Var,
        weights: Option<Var>,
        /// `exp(l_ij - max_i) / Σ_k w_ik exp(l_ik - max_i)`, kept for the weight gradient.
        unweighted: Vec<f64>,
    },
    Transpose(Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    MeanRows(Var, Vec<usize>),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    SmoothL1(Var, Var, f64),
    OuterSum(Var, Var),
    ScatterPairs(Var, Vec<(usize, usize)>, usize),
    GroupMax(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self`, name by name.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (k, v) in &other.grads {
            match self.grads.get_mut(k) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(v.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(k.clone(), v.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.grads.values_mut() {
            for a in v.data_mut() {
                *a *= factor;
            }
        }
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.len() != b.len() || a.rows() != b.rows() {
        return Err(Error::contract(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.ensure_finite(what)?;
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_needs_grad(&self, op: &Op) -> bool {
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b)
            | Op::MatMulT(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulScalar(a, b)
            | Op::SmoothL1(a, b, _)
            | Op::OuterSum(a, b) => ng(a) || ng(b),
            Op::WeightedSoftmax {
                logits, weights, ..
            } => ng(logits) || weights.as_ref().is_some_and(ng),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Elu(a)
            | Op::LeakyRelu(a, _)
            | Op::Sigmoid(a)
            | Op::LnClamped(a, _)
            | Op::Transpose(a)
            | Op::SliceCols(a, ..)
            | Op::SliceRows(a, ..)
            | Op::MeanRows(a, _)
            | Op::MaxRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::ScatterPairs(a, ..)
            | Op::GroupMax(a, _) => ng(a),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.iter().any(ng),
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        let requires = t.requires_grad();
        let v = self.push(t, Op::Leaf, "constant")?;
        self.nodes[v.0].needs_grad = requires;
        Ok(v)
    }

    /// Leaf for the named parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter {name:?}")))?
            .clone();
        let v = self.push(t, Op::Leaf, name)?;
        self.nodes[v.0].needs_grad = true;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = ta.matmul(tb)?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::contract(format!(
                "matmul_t: {:?} x {:?}ᵀ",
                ta.shape(),
                tb.shape()
            )));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, 0.0);
        self.push(Tensor::matrix(m, n, out)?, Op::MatMulT(a, b), "matmul_t")
    }

    fn zip_map(&mut self, a: Var, b: Var, op: Op, what: &str, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, what)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op, what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds the row vector `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.cols();
        if tb.len() != c {
            return Err(Error::contract(format!(
                "add_row: bias of length {} for {c} columns",
                tb.len()
            )));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, Op::AddRow(a, b), "add_row")
    }

    fn map(&mut self, a: Var, op: Op, what: &str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(out, op, what)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.map(a, Op::Scale(a, c), "scale", |x| x * c)
    }

    /// Multiplies every entry of `a` by the one-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        self.map(a, Op::MulScalar(a, s), "mul_scalar", |x| x * sv)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Relu(a), "relu", |x| if x > 0.0 { x } else { 0.0 })
    }

    /// ELU with α = 1.
    pub fn elu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Elu(a), "elu", |x| if x > 0.0 { x } else { x.exp_m1() })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map(a, Op::LeakyRelu(a, slope), "leaky_relu", move |x| {
            if x > 0.0 {
                x
            } else {
                slope * x
            }
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), "sigmoid", stable_sigmoid)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        self.map(a, Op::LnClamped(a, floor), "ln", move |x| x.max(floor).ln())
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Result<Var> {
        match act {
            Activation::Relu => self.relu(a),
            Activation::Elu => self.elu(a),
            Activation::Identity => Ok(a),
        }
    }

    pub fn softmax_rows(&mut self, logits: Var) -> Result<Var> {
        self.weighted_softmax_rows(logits, None)
    }

    /// Row-wise softmax of `logits + ln(weights)`, computed without the log:
    /// zero weights give exactly zero probability and a finite gradient.
    /// Every row needs at least one positive weight.
    pub fn weighted_softmax_rows(&mut self, logits: Var, weights: Option<Var>) -> Result<Var> {
        let tl = self.value(logits);
        let (r, c) = (tl.rows(), tl.cols());
        let tw = match weights {
            Some(w) => {
                let tw = self.value(w);
                same_shape(tl, tw, "weighted_softmax")?;
                if tw.data().iter().any(|x| *x < 0.0) {
                    return Err(Error::contract("weighted_softmax: negative weight"));
                }
                Some(tw)
            }
            None => None,
        };
        let mut out = vec![0.0; r * c];
        let mut unweighted = vec![0.0; r * c];
        for i in 0..r {
            let row = tl.row(i);
            let wrow = tw.map(|t| t.row(i));
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| wrow.map_or(true, |w| w[*j] > 0.0))
                .map(|(_, x)| *x)
                .fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::contract(format!(
                    "weighted_softmax: row {i} has no positive weight"
                )));
            }
            let mut denom = 0.0;
            for j in 0..c {
                let e = (row[j] - max).exp();
                unweighted[i * c + j] = e;
                let w = wrow.map_or(1.0, |w| w[j]);
                denom += w * e;
            }
            for j in 0..c {
                let w = wrow.map_or(1.0, |w| w[j]);
                unweighted[i * c + j] /= denom;
                out[i * c + j] = w * unweighted[i * c + j];
            }
        }
        let out = Tensor::new(tl.shape().to_vec(), out)?;
        self.push(
            out,
            Op::WeightedSoftmax {
                logits,
                weights,
                unweighted,
            },
            "softmax",
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a), "transpose")
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if start >= end || end > c {
            return Err(Error::contract(format!("slice_cols {start}..{end} of {c}")));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&ta.row(i)[start..end]);
        }
        let out = Tensor::matrix(r, w, data)?;
        self.push(out, Op::SliceCols(a, start, end), "slice_cols")
    }

    /// Rows `start..end` of a matrix (a rank-1 tensor counts as a column here).
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = if ta.rank() == 1 {
            (ta.len(), 1)
        } else {
            (ta.rows(), ta.cols())
        };
        if start >= end || end > r {
            return Err(Error::contract(format!("slice_rows {start}..{end} of {r}")));
        }
        let data = ta.data()[start * c..end * c].to_vec();
        let out = Tensor::matrix(end - start, c, data)?;
        self.push(out, Op::SliceRows(a, start), "slice_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_cols of nothing"));
        };
        let r = self.value(*first).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.value(*p).cols()).collect();
        if parts.iter().any(|p| self.value(*p).rows() != r) {
            return Err(Error::contract("concat_cols: row counts differ"));
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(i));
            }
        }
        let out = Tensor::matrix(r, total, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()), "concat_cols")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::contract("concat_rows of nothing"));
        };
        let c = self.value(*first).cols();
        if parts.iter().any(|p| self.value(*p).cols() != c) {
            return Err(Error::contract("concat_rows: column counts differ"));
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let out = Tensor::matrix(rows, c, data)?;
        self.push(out, Op::ConcatRows(parts.to_vec()), "concat_rows")
    }

    /// Mean of the selected rows, as a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        let c = ta.cols();
        if rows.is_empty() || rows.iter().any(|r| *r >= ta.rows()) {
            return Err(Error::contract("mean_rows: empty or out-of-range selection"));
        }
        let mut acc = vec![0.0; c];
        for &r in rows {
            for (x, y) in acc.iter_mut().zip(ta.row(r)) {
                *x += y;
            }
        }
        let n = rows.len() as f64;
        acc.iter_mut().for_each(|x| *x /= n);
        let out = Tensor::matrix(1, c, acc)?;
        self.push(out, Op::MeanRows(a, rows.to_vec()), "mean_rows")
    }

    /// Column-wise maximum over rows. Ties go to the lowest row index.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let (r, c) = (ta.rows(), ta.cols());
        if r == 0 || ta.is_empty() {
            return Err(Error::contract("max_rows of an empty matrix"));
        }
        let mut best = ta.row(0).to_vec();
        let mut arg = vec![0usize; c];
        for i in 1..r {
            for (j, x) in ta.row(i).iter().enumerate() {
                if *x > best[j] {
                    best[j] = *x;
                    arg[j] = i;
                }
            }
        }
        let out = Tensor::matrix(1, c, best)?;
        self.push(out, Op::MaxRows(a, arg), "max_rows")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Mean Smooth L1 between equal-shape tensors; see [`super::smooth_l1`].
    pub fn smooth_l1(&mut self, pred: Var, target: Var, delta: f64) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        same_shape(tp, tt, "smooth_l1")?;
        let loss = super::ops::smooth_l1(tp, tt, delta)?;
        self.push(Tensor::scalar(loss), Op::SmoothL1(pred, target, delta), "smooth_l1")
    }

    /// `out[i][j] = u[i] + v[j]` for length-`m` and length-`n` inputs.
    pub fn outer_sum(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        let (m, n) = (tu.len(), tv.len());
        let mut data = Vec::with_capacity(m * n);
        for a in tu.data() {
            for b in tv.data() {
                data.push(a + b);
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        self.push(out, Op::OuterSum(u, v), "outer_sum")
    }

    /// Symmetric `m × m` matrix with `w[p]` at both `(i, j)` and `(j, i)` for
    /// each pair `p = (i, j)`; zero elsewhere.
    pub fn scatter_pairs(&mut self, w: Var, pairs: &[(usize, usize)], m: usize) -> Result<Var> {
        let tw = self.value(w);
        if tw.len() != pairs.len() {
            return Err(Error::contract(format!(
                "scatter_pairs: {} weights for {} pairs",
                tw.len(),
                pairs.len()
            )));
        }
        let mut data = vec![0.0; m * m];
        for (p, &(i, j)) in pairs.iter().enumerate() {
            if i >= m || j >= m || i == j {
                return Err(Error::contract(format!("scatter_pairs: bad pair ({i}, {j})")));
            }
            data[i * m + j] = tw.data()[p];
            data[j * m + i] = tw.data()[p];
        }
        let out = Tensor::matrix(m, m, data)?;
        self.push(out, Op::ScatterPairs(w, pairs.to_vec(), m), "scatter_pairs")
    }

    /// Per-group maximum: `out[g] = max { x[e] : group_of[e] == g }`.
    pub fn group_max(&mut self, x: Var, group_of: &[usize], groups: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != group_of.len() {
            return Err(Error::contract("group_max: group map length mismatch"));
        }
        let mut best = vec![f64::NEG_INFINITY; groups];
        let mut arg = vec![usize::MAX; groups];
        for (e, (&g, &v)) in group_of.iter().zip(tx.data()).enumerate() {
            if g >= groups {
                return Err(Error::contract("group_max: group index out of range"));
            }
            if v > best[g] {
                best[g] = v;
                arg[g] = e;
            }
        }
        if arg.contains(&usize::MAX) {
            return Err(Error::contract("group_max: empty group"));
        }
        let out = Tensor::matrix(1, groups, best)?;
        self.push(out, Op::GroupMax(x, arg), "group_max")
    }

    /// Reverse sweep from a one-element `loss`; returns gradients for every
    /// parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.propagate(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }

        let mut out = BTreeMap::new();
        for (name, v) in &self.params {
            if v.0 > loss.0 {
                continue;
            }
            let shape = self.value(*v).shape().to_vec();
            let g = grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.value(*v).len()]);
            let t = Tensor::new(shape, g)?;
            t.ensure_finite(&format!("gradient of {name}"))?;
            out.insert(name.clone(), t);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, idx: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let needs = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if needs(a) {
                    // dA = G · Bᵀ
                    with_grad(grads, *a, m * k, &mut |g| {
                        gemm(m, n, k, gout, false, tb.data(), true, g, 1.0)
                    });
                }
                if needs(b) {
                    // dB = Aᵀ · G
                    with_grad(grads, *b, k * n, &mut |g| {
                        gemm(k, m, n, ta.data(), true, gout, false, g, 1.0)
                    });
                }
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if needs(a) {
                    // dA = G · B
                    with_grad(grads, *a, m * k, &mut |g| {
                        gemm(m, n, k, gout, false, tb.data(), false, g, 1.0)
                    });
                }
                if needs(b) {
                    // dB = Gᵀ · A
                    with_grad(grads, *b, n * k, &mut |g| {
                        gemm(n, m, k, gout, true, ta.data(), false, g, 1.0)
                    });
                }
            }
            Op::Add(a, b) => {
                if needs(a) {
                    add_grad(grads, *a, gout.to_vec());
                }
                if needs(b) {
                    add_grad(grads, *b, gout.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    add_grad(grads, *a, gout.to_vec());
                }
                if needs(b) {
                    add_grad(grads, *b, gout.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if needs(a) {
                    add_grad(grads, *a, gout.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if needs(b) {
                    add_grad(grads, *b, gout.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            Op::AddRow(a, b) => {
                if needs(a) {
                    add_grad(grads, *a, gout.to_vec());
                }
                if needs(b) {
                    let c = out.cols();
                    let mut gb = vec![0.0; c];
                    for row in gout.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    add_grad(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => add_grad(grads, *a, gout.iter().map(|g| g * c).collect()),
            Op::MulScalar(a, s) => {
                let sv = self.value(*s).data()[0];
                let ta = self.value(*a);
                if needs(a) {
                    add_grad(grads, *a, gout.iter().map(|g| g * sv).collect());
                }
                if needs(s) {
                    let d: f64 = gout.iter().zip(ta.data()).map(|(g, x)| g * x).sum();
                    add_grad(grads, *s, vec![d]);
                }
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                add_grad(grads, 
                    *a,
                    gout.iter()
                        .zip(ta.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Elu(a) => {
                let ta = self.value(*a);
                add_grad(grads, 
                    *a,
                    gout.iter()
                        .zip(ta.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { g * x.exp() })
                        .collect(),
                );
            }
            Op::LeakyRelu(a, slope) => {
                let ta = self.value(*a);
                add_grad(grads, 
                    *a,
                    gout.iter()
                        .zip(ta.data())
                        .map(|(g, x)| if *x > 0.0 { *g } else { g * slope })
                        .collect(),
                );
            }
            Op::Sigmoid(a) => add_grad(grads, 
                *a,
                gout.iter()
                    .zip(out.data())
                    .map(|(g, y)| g * y * (1.0 - y))
                    .collect(),
            ),
            Op::LnClamped(a, floor) => {
                let ta = self.value(*a);
                add_grad(grads, 
                    *a,
                    gout.iter()
                        .zip(ta.data())
                        .map(|(g, x)| if *x > *floor { g / x } else { 0.0 })
                        .collect(),
                );
            }
            Op::WeightedSoftmax {
                logits,
                weights,
                unweighted,
            } => {
                let c = out.cols();
                let alpha = out.data();
                let mut gl = vec![0.0; alpha.len()];
                let mut gw = vec![0.0; alpha.len()];
                for i in 0..out.rows() {
                    let s = i * c..(i + 1) * c;
                    let dot: f64 = gout[s.clone()]
                        .iter()
                        .zip(&alpha[s.clone()])
                        .map(|(g, a)| g * a)
                        .sum();
                    for j in s {
                        let centered = gout[j] - dot;
                        gl[j] = alpha[j] * centered;
                        gw[j] = unweighted[j] * centered;
                    }
                }
                if needs(logits) {
                    add_grad(grads, *logits, gl);
                }
                if let Some(w) = weights {
                    if needs(w) {
                        add_grad(grads, *w, gw);
                    }
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                let mut g = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        g[j * r + i] = gout[i * c + j];
                    }
                }
                add_grad(grads, *a, g);
            }
            Op::SliceCols(a, start, end) => {
                let ta = self.value(*a);
                let (r, c) = (ta.rows(), ta.cols());
                let w = end - start;
                with_grad(grads, *a, r * c, &mut |g| {
                    for i in 0..r {
                        for j in 0..w {
                            g[i * c + start + j] += gout[i * w + j];
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let ta = self.value(*a);
                let c = out.cols();
                let offset = start * c;
                with_grad(grads, *a, ta.len(), &mut |g| {
                    g[offset..offset + gout.len()]
                        .iter_mut()
                        .zip(gout)
                        .for_each(|(x, y)| *x += y);
                });
            }
            Op::ConcatCols(parts) => {
                let r = out.rows();
                let total = out.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if needs(p) {
                        let mut g = Vec::with_capacity(r * w);
                        for i in 0..r {
                            g.extend_from_slice(&gout[i * total + offset..i * total + offset + w]);
                        }
                        add_grad(grads, *p, g);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if needs(p) {
                        add_grad(grads, *p, gout[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::MeanRows(a, rows) => {
                let ta = self.value(*a);
                let c = ta.cols();
                let scale = 1.0 / rows.len() as f64;
                with_grad(grads, *a, ta.len(), &mut |g| {
                    for &r in rows {
                        for j in 0..c {
                            g[r * c + j] += gout[j] * scale;
                        }
                    }
                });
            }
            Op::MaxRows(a, arg) => {
                let ta = self.value(*a);
                let c = ta.cols();
                with_grad(grads, *a, ta.len(), &mut |g| {
                    for (j, &r) in arg.iter().enumerate() {
                        g[r * c + j] += gout[j];
                    }
                });
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                add_grad(grads, *a, vec![gout[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                add_grad(grads, *a, vec![gout[0] / n as f64; n]);
            }
            Op::SmoothL1(p, t, delta) => {
                let (tp, tt) = (self.value(*p), self.value(*t));
                let n = tp.len() as f64;
                let d: Vec<f64> = tp
                    .data()
                    .iter()
                    .zip(tt.data())
                    .map(|(a, b)| gout[0] * super::ops::smooth_l1_derivative(a - b, *delta) / n)
                    .collect();
                if needs(t) {
                    add_grad(grads, *t, d.iter().map(|x| -x).collect());
                }
                if needs(p) {
                    add_grad(grads, *p, d);
                }
            }
            Op::OuterSum(u, v) => {
                let (m, n) = (self.value(*u).len(), self.value(*v).len());
                if needs(u) {
                    add_grad(grads, *u, (0..m).map(|i| gout[i * n..(i + 1) * n].iter().sum()).collect());
                }
                if needs(v) {
                    let mut gv = vec![0.0; n];
                    for row in gout.chunks(n) {
                        gv.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                    add_grad(grads, *v, gv);
                }
            }
            Op::ScatterPairs(w, pairs, m) => {
                let m = *m;
                add_grad(grads, 
                    *w,
                    pairs
                        .iter()
                        .map(|&(i, j)| gout[i * m + j] + gout[j * m + i])
                        .collect(),
                );
            }
            Op::GroupMax(x, arg) => {
                let n = self.value(*x).len();
                with_grad(grads, *x, n, &mut |g| {
                    for (grp, &e) in arg.iter().enumerate() {
                        g[e] += gout[grp];
                    }
                });
            }
        }
        Ok(())
    }

    /// Parameter name → node, for callers that need the leaves (e.g. hashing).
    pub fn param_nodes(&self) -> HashMap<&str, Var> {
        self.params.iter().map(|(k, v)| (k.as_str(), *v)).collect()
    }
}

fn add_grad(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn with_grad(grads: &mut [Option<Vec<f64>>], v: Var, len: usize, f: &mut dyn FnMut(&mut [f64])) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(entries: &[(&str, Tensor)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (k, v) in entries {
            s.insert(k, v.clone());
        }
        s
    }

    #[test]
    fn square_gradient() {
        let s = store(&[("x", Tensor::vector(vec![3.0]))]);
        let mut g = Graph::new();
        let x = g.param(&s, "x").unwrap();
        let y = g.mul(x, x).unwrap();
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l).unwrap().get("x").unwrap().data(), &[6.0]);
    }

    #[test]
    fn smooth_l1_gradient_at_minimum_is_zero() {
        let s = store(&[("x", Tensor::vector(vec![0.0]))]);
        let mut g = Graph::new();
        let x = g.param(&s, "x").unwrap();
        let zero = g.constant(Tensor::vector(vec![0.0])).unwrap();
        let l = g.smooth_l1(x, zero, 1.0).unwrap();
        assert_eq!(g.backward(l).unwrap().get("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let s = store(&[("x", Tensor::vector(vec![1.0, 2.0]))]);
        let mut g = Graph::new();
        let x = g.param(&s, "x").unwrap();
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_parameter_accumulates() {
        let s = store(&[("x", Tensor::vector(vec![2.0]))]);
        let mut g = Graph::new();
        let a = g.param(&s, "x").unwrap();
        let b = g.param(&s, "x").unwrap();
        assert_eq!(a, b);
        let y = g.add(a, b).unwrap();
        let l = g.sum(y).unwrap();
        assert_eq!(g.backward(l).unwrap().get("x").unwrap().data(), &[2.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1e300])).unwrap();
        let y = g.mul(x, x);
        assert!(matches!(y, Err(Error::NumericDomain(_))));
    }

    #[test]
    fn zero_weights_give_exact_zero_probability() {
        let mut g = Graph::new();
        let l = g
            .constant(Tensor::matrix(1, 3, vec![5.0, 1.0, 2.0]).unwrap())
            .unwrap();
        let w = g
            .constant(Tensor::matrix(1, 3, vec![0.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let a = g.weighted_softmax_rows(l, Some(w)).unwrap();
        let v = g.value(a).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_weight_row_is_an_error() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        let w = g.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()).unwrap();
        assert!(g.weighted_softmax_rows(l, Some(w)).is_err());
    }

    #[test]
    fn max_rows_routes_gradient_to_argmax() {
        let s = store(&[(
            "h",
            Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap(),
        )]);
        let mut g = Graph::new();
        let h = g.param(&s, "h").unwrap();
        let m = g.max_rows(h).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
        let l = g.sum(m).unwrap();
        let gr = g.backward(l).unwrap();
        assert_eq!(gr.get("h").unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
    }
}
