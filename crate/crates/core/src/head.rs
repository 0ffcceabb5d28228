//! Knowledge infusion, the severity classifier, ordinal soft-label targets and metrics.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dropout, softmax, Activation, FeedForward, Graph, Mode, ParamStore, Tensor, Var};

/// Probabilities below this are clamped before taking the log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Ordered severity classes with ranks `0..C` and the soft-label penalty β.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityScale {
    labels: Vec<String>,
    beta: f64,
}

impl SeverityScale {
    pub fn new(labels: Vec<String>, beta: f64) -> Result<Self> {
        if !(3..=4).contains(&labels.len()) {
            return Err(Error::Config(format!(
                "severity scales with {} classes are not supported (use 3 or 4)",
                labels.len()
            )));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be a finite non-negative number, got {beta}")));
        }
        Ok(SeverityScale { labels, beta })
    }

    /// minimum < mild < moderate < severe
    pub fn four_class(beta: f64) -> Result<Self> {
        Self::new(["minimum", "mild", "moderate", "severe"].map(String::from).to_vec(), beta)
    }

    /// Class names for a three-level scale.
    pub fn three_class(beta: f64) -> Result<Self> {
        Self::new(["mild", "moderate", "severe"].map(String::from).to_vec(), beta)
    }

    pub fn with_classes(classes: usize, beta: f64) -> Result<Self> {
        match classes {
            4 => Self::four_class(beta),
            3 => Self::three_class(beta),
            c => Err(Error::Config(format!("class_count {c} is not supported (use 3 or 4)"))),
        }
    }

    pub fn classes(&self) -> usize {
        self.labels.len()
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, rank: usize) -> Option<&str> {
        self.labels.get(rank).map(String::as_str)
    }

    pub fn soft_labels(&self, rank: usize) -> Result<Vec<f64>> {
        soft_labels(rank, self.classes(), self.beta)
    }
}

/// `y_i = exp(−β|r − i|) / Σ_k exp(−β|r − k|)` over ranks `0..classes`.
pub fn soft_labels(rank: usize, classes: usize, beta: f64) -> Result<Vec<f64>> {
    if rank >= classes {
        return Err(Error::contract(format!("rank {rank} outside 0..{classes}")));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::contract(format!("beta {beta} must be finite and non-negative")));
    }
    // The peak term is exp(0) = 1, so no shift is needed for stability.
    let raw: Vec<f64> = (0..classes)
        .map(|i| (-beta * (rank as f64 - i as f64).abs()).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|x| x / total).collect())
}

/// `−Σ y_i ln ŷ_i`, with `ŷ` clamped at [`LOG_FLOOR`].
pub fn ordinal_loss(probabilities: &[f64], target: &[f64]) -> Result<f64> {
    if probabilities.len() != target.len() || target.is_empty() {
        return Err(Error::contract(format!(
            "ordinal_loss over {} probabilities and {} targets",
            probabilities.len(),
            target.len()
        )));
    }
    let mut loss = 0.0;
    for (p, y) in probabilities.iter().zip(target) {
        if *p < LOG_FLOOR && *y > 0.0 {
            log::debug!("clamping probability {p} to {LOG_FLOOR}");
        }
        loss -= y * p.max(LOG_FLOOR).ln();
    }
    Ok(loss)
}

/// Soft-label cross-entropy of `logits` (`1 × C`) against `target` on the graph.
pub fn ordinal_loss_node(g: &mut Graph, logits: Var, target: &[f64]) -> Result<Var> {
    if g.value(logits).len() != target.len() {
        return Err(Error::contract("target length differs from class count"));
    }
    let p = g.softmax_rows(logits)?;
    let lp = g.ln_clamped(p, LOG_FLOOR)?;
    let y = g.constant(Tensor::matrix(1, target.len(), target.to_vec())?)?;
    let prod = g.mul(lp, y)?;
    let s = g.sum(prod)?;
    g.scale(s, -1.0)
}

/// `z = p′ ⊕ g`.
pub fn fuse(p_prime: &[f64], g: &[f64], expected: (usize, usize)) -> Result<Vec<f64>> {
    if p_prime.len() != expected.0 || g.len() != expected.1 {
        return Err(Error::contract(format!(
            "fuse expects {}+{} values, got {}+{}",
            expected.0,
            expected.1,
            p_prime.len(),
            g.len()
        )));
    }
    Ok(p_prime.iter().chain(g).copied().collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probabilities: Vec<f64>,
    pub predicted_rank: usize,
    pub fused: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: &[f64], fused: Vec<f64>) -> Result<Self> {
        let p = softmax(&Tensor::vector(logits.to_vec()), 0)?.into_data();
        Ok(Prediction {
            predicted_rank: argmax(&p),
            probabilities: p,
            fused,
        })
    }
}

/// `z → ReLU(z·W₁ + b₁) → ·W₂ + b₂` (class logits), with dropout on `z` and the hidden layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionHead {
    pub hidden: FeedForward,
    pub output: FeedForward,
}

impl PredictionHead {
    pub fn new(d_in: usize, hidden: usize, classes: usize) -> Self {
        PredictionHead {
            hidden: FeedForward::new("head.hidden", d_in, hidden, Activation::Relu),
            output: FeedForward::new("head.output", hidden, classes, Activation::Identity),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.hidden.init(store, rng);
        self.output.init(store, rng);
    }

    pub fn classes(&self) -> usize {
        self.output.d_out
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let z = dropout(g, z, rate, mode, rng)?;
        let h = self.hidden.forward(g, store, z)?;
        let h = dropout(g, h, rate, mode, rng)?;
        self.output.forward(g, store, h)
    }

    /// Evaluation-mode prediction for a fused vector.
    pub fn predict(&self, store: &ParamStore, z: &[f64]) -> Result<Prediction> {
        let mut g = Graph::new();
        let zv = g.constant(Tensor::matrix(1, z.len(), z.to_vec())?)?;
        // Dropout is off in evaluation, so the generator is never drawn from.
        let mut no_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let logits = self.forward(&mut g, store, zv, 0.0, Mode::Eval, &mut no_rng)?;
        Prediction::from_logits(g.value(logits).data(), z.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Support-weighted precision, recall and F1 with the confusion matrix
/// (`confusion[gold][predicted]`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: Vec<Vec<usize>>,
}

pub fn weighted_metrics(gold: &[usize], predicted: &[usize], classes: usize) -> Result<Metrics> {
    if gold.len() != predicted.len() {
        return Err(Error::contract(format!(
            "{} gold labels for {} predictions",
            gold.len(),
            predicted.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::contract("metrics over an empty set"));
    }
    if let Some(r) = gold.iter().chain(predicted).find(|r| **r >= classes) {
        return Err(Error::contract(format!("rank {r} outside 0..{classes}")));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (g, p) in gold.iter().zip(predicted) {
        confusion[*g][*p] += 1;
    }
    let n = gold.len() as f64;
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let mut per_class = Vec::with_capacity(classes);
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted_c: usize = confusion.iter().map(|row| row[c]).sum();
        if predicted_c == 0 && support > 0 {
            log::warn!("class {c} is never predicted; its precision is 0");
        }
        let precision = ratio(tp, predicted_c);
        let recall = ratio(tp, support);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let w = support as f64 / n;
        wp += w * precision;
        wr += w * recall;
        wf += w * f1;
        per_class.push(ClassMetrics {
            class: c,
            precision,
            recall,
            f1,
            support,
        });
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    Ok(Metrics {
        precision: wp,
        recall: wr,
        f1: wf,
        accuracy: correct as f64 / n,
        per_class,
        confusion,
    })
}
