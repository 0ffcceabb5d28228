//! The assembled classifier: text encoder ⊕ KG encoder → prediction head.

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{GnnConfig, KgEncoder};
use crate::head::{ordinal_loss_node, Prediction, PredictionHead, SeverityScale};
use crate::kg::KnowledgeGraph;
use crate::numerics::{Graph, Mode, ParamStore, Tensor, Var};
use crate::text::{collect_output, AttentionOutput, Blocks, EmbeddedPost, TextEncoder, TextEncoderConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub gnn: GnnConfig,
    pub classes: usize,
    pub beta: f64,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text: TextEncoderConfig::default(),
            gnn: GnnConfig::default(),
            classes: 4,
            beta: 3.0,
            head_hidden: 128,
            dropout: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeverityModel {
    pub config: ModelConfig,
    pub text: TextEncoder,
    pub kg: KgEncoder,
    pub head: PredictionHead,
    pub scale: SeverityScale,
}

/// Everything an explanation needs from one evaluation-mode pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub prediction: Prediction,
    pub p_prime: Vec<f64>,
    pub words: Vec<AttentionOutput>,
    pub sentences: AttentionOutput,
}

impl SeverityModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!("dropout {} must lie in [0, 1)", config.dropout)));
        }
        if config.text.sentence_dim != config.gnn.in_dim {
            return Err(Error::Config(format!(
                "node features ({}) must match the sentence embedding width ({})",
                config.gnn.in_dim, config.text.sentence_dim
            )));
        }
        let text = TextEncoder::new(config.text.clone())?;
        let kg = KgEncoder::new(config.gnn.clone())?;
        let scale = SeverityScale::with_classes(config.classes, config.beta)?;
        let head = PredictionHead::new(text.output_dim() + kg.output_dim(), config.head_hidden, config.classes);
        Ok(SeverityModel {
            config,
            text,
            kg,
            head,
            scale,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.text.init(store, rng);
        self.kg.init(store, rng);
        self.head.init(store, rng);
    }

    pub fn initialized<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut s = ParamStore::new();
        self.init(&mut s, rng);
        s
    }

    /// Width of `z = p′ ⊕ g` (684 with defaults).
    pub fn fused_dim(&self) -> usize {
        self.text.output_dim() + self.kg.output_dim()
    }

    /// Logits for one post given the pooled KG node `kg`; also returns `z`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_post<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        post: &EmbeddedPost,
        kg: Var,
        blocks: Blocks,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let text = self.text.forward(g, store, post, blocks)?;
        let z = g.concat_cols(&[text.p_prime, kg])?;
        let logits = self.head.forward(g, store, z, self.config.dropout, mode, rng)?;
        Ok((logits, z))
    }

    /// Mean soft-label cross-entropy over `posts`. The KG is encoded once and
    /// shared by every post in the batch.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_loss<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        graph: &KnowledgeGraph,
        posts: &[&EmbeddedPost],
        blocks: Blocks,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if posts.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let kg = self.kg.forward(g, store, graph, None)?.g;
        let mut total: Option<Var> = None;
        for post in posts {
            let rank = post
                .label
                .ok_or_else(|| Error::Validation(format!("post {:?} has no label", post.id)))?;
            let target = self.scale.soft_labels(rank)?;
            let (logits, _) = self.forward_post(g, store, post, kg, blocks, mode, rng)?;
            let l = ordinal_loss_node(g, logits, &target)?;
            total = Some(match total {
                Some(t) => g.add(t, l)?,
                None => l,
            });
        }
        g.scale(total.expect("non-empty batch"), 1.0 / posts.len() as f64)
    }

    /// Pooled KG representation `g` (`1 × hidden`).
    pub fn encode_graph(&self, store: &ParamStore, graph: &KnowledgeGraph) -> Result<Tensor> {
        self.kg.encode(store, graph, None)
    }

    /// Evaluation-mode pass for one post with a precomputed `g`.
    pub fn infer(&self, store: &ParamStore, post: &EmbeddedPost, kg: &Tensor, blocks: Blocks) -> Result<Inference> {
        let mut g = Graph::new();
        let kv = g.constant(kg.clone())?;
        let text = self.text.forward(&mut g, store, post, blocks)?;
        let z = g.concat_cols(&[text.p_prime, kv])?;
        let mut no_rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let logits = self.head.forward(&mut g, store, z, 0.0, Mode::Eval, &mut no_rng)?;
        let prediction = Prediction::from_logits(g.value(logits).data(), g.value(z).data().to_vec())?;
        Ok(Inference {
            prediction,
            p_prime: g.value(text.p_prime).data().to_vec(),
            words: text.words.iter().map(|(n, v)| collect_output(&g, n, v)).collect(),
            sentences: collect_output(&g, &text.sentences.0, &text.sentences.1),
        })
    }

    pub fn predict(&self, store: &ParamStore, post: &EmbeddedPost, kg: &Tensor, blocks: Blocks) -> Result<Prediction> {
        Ok(self.infer(store, post, kg, blocks)?.prediction)
    }
}
