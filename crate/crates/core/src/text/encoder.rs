use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{collect_output, AttentionNodes, AttentionOutput, MultiHeadAttention};
use super::tokenize::TokenizedPost;
use crate::embedding::{Embedders, WordEmbedder};
use crate::error::{Error, Result};
use crate::numerics::{Activation, FeedForward, Graph, ParamStore, Tensor, Var};

/// Which representation branches feed `p′`. Excluded branches contribute zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Blocks {
    pub word: bool,
    pub sentence: bool,
    pub post: bool,
}

impl Default for Blocks {
    fn default() -> Self {
        Blocks::ALL
    }
}

impl Blocks {
    pub const ALL: Blocks = Blocks {
        word: true,
        sentence: true,
        post: true,
    };

    /// From block numbers: 1 = word, 2 = sentence, 3 = post.
    pub fn from_numbers(numbers: &[u8]) -> Result<Self> {
        let mut b = Blocks {
            word: false,
            sentence: false,
            post: false,
        };
        for n in numbers {
            match n {
                1 => b.word = true,
                2 => b.sentence = true,
                3 => b.post = true,
                other => return Err(Error::Config(format!("unknown block {other}; expected 1, 2 or 3"))),
            }
        }
        if !(b.word || b.sentence || b.post) {
            return Err(Error::Config("at least one block must be enabled".into()));
        }
        Ok(b)
    }

    pub fn numbers(&self) -> Vec<u8> {
        let mut v = Vec::new();
        if self.word {
            v.push(1);
        }
        if self.sentence {
            v.push(2);
        }
        if self.post {
            v.push(3);
        }
        v
    }
}

/// A tokenized post with all three encoding levels looked up.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedPost {
    pub id: String,
    pub label: Option<usize>,
    pub tokens: Vec<Vec<String>>,
    /// Per sentence, `tokens × word_dim`.
    pub words: Vec<Tensor>,
    /// `sentences × sentence_dim`
    pub sentences: Tensor,
    /// `1 × sentence_dim`
    pub post: Tensor,
}

impl EmbeddedPost {
    pub fn from_tokenized(post: &TokenizedPost, emb: &Embedders) -> Result<Self> {
        let words = post
            .sentences
            .iter()
            .map(|s| embed_tokens(s, &emb.words))
            .collect::<Result<Vec<_>>>()?;
        let sents = post
            .sentence_texts
            .iter()
            .map(|s| emb.embed_sentence(s))
            .collect::<Result<Vec<_>>>()?;
        let pv = emb.embed_post(&post.text)?;
        Ok(EmbeddedPost {
            id: post.id.clone(),
            label: post.label,
            tokens: post.sentences.clone(),
            words,
            sentences: Tensor::from_rows(&sents)?,
            post: Tensor::matrix(1, pv.len(), pv)?,
        })
    }
}

fn embed_tokens(tokens: &[String], words: &WordEmbedder) -> Result<Tensor> {
    if tokens.is_empty() {
        return Err(Error::contract("sentence without tokens"));
    }
    let rows = tokens
        .iter()
        .map(|t| words.embed_word(t))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub word_dim: usize,
    pub sentence_dim: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_tokens: usize,
    pub max_sentences: usize,
    /// Pad every sentence to `max_tokens` and every post to `max_sentences`.
    /// Masking makes the result identical to unpadded evaluation; this only
    /// changes matrix shapes.
    pub pad_to_max: bool,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        TextEncoderConfig {
            word_dim: crate::embedding::WORD_DIM,
            sentence_dim: crate::embedding::SENTENCE_DIM,
            hidden: 128,
            heads: 8,
            max_tokens: 64,
            max_sentences: 16,
            pad_to_max: false,
        }
    }
}

/// Word-level and sentence-level attention plus the FFN branches that build `p′`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub word_attention: MultiHeadAttention,
    pub sentence_attention: MultiHeadAttention,
    pub sentence_ffn: FeedForward,
    pub post_ffn: FeedForward,
}

/// Graph handles for one encoded post.
pub struct TextNodes {
    pub p_prime: Var,
    pub words: Vec<(AttentionNodes, Vec<bool>)>,
    pub sentences: (AttentionNodes, Vec<bool>),
}

fn pad_rows(t: &Tensor, rows: usize) -> Result<(Tensor, Vec<bool>)> {
    let n = t.rows();
    let mut valid = vec![true; n];
    if rows <= n {
        return Ok((t.clone(), valid));
    }
    let mut data = t.data().to_vec();
    data.resize(rows * t.cols(), 0.0);
    valid.resize(rows, false);
    Ok((Tensor::matrix(rows, t.cols(), data)?, valid))
}

fn valid_rows(valid: &[bool]) -> Vec<usize> {
    valid
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.then_some(i))
        .collect()
}

impl TextEncoder {
    pub fn new(config: TextEncoderConfig) -> Result<Self> {
        let word_attention = MultiHeadAttention::projected("text.word_attn", config.word_dim, config.heads)?;
        let sentence_attention =
            MultiHeadAttention::projected("text.sentence_attn", config.sentence_dim, config.heads)?;
        let sentence_ffn = FeedForward::new("text.sentence_ffn", config.sentence_dim, config.hidden, Activation::Relu);
        let post_ffn = FeedForward::new("text.post_ffn", config.sentence_dim, config.hidden, Activation::Relu);
        Ok(TextEncoder {
            config,
            word_attention,
            sentence_attention,
            sentence_ffn,
            post_ffn,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.word_attention.init(store, rng);
        self.sentence_attention.init(store, rng);
        self.sentence_ffn.init(store, rng);
        self.post_ffn.init(store, rng);
    }

    /// Width of `p′`: word_dim + 2·hidden (556 with defaults).
    pub fn output_dim(&self) -> usize {
        self.config.word_dim + 2 * self.config.hidden
    }

    /// Slices of `p′` owned by the word, sentence and post branches.
    pub fn block_ranges(&self) -> [std::ops::Range<usize>; 3] {
        let w = self.config.word_dim;
        let h = self.config.hidden;
        [0..w, w..w + h, w + h..w + 2 * h]
    }

    fn word_level(&self, g: &mut Graph, store: &ParamStore, words: &Tensor) -> Result<(AttentionNodes, Vec<bool>)> {
        if words.cols() != self.config.word_dim {
            return Err(Error::contract(format!(
                "word vectors have width {}, expected {}",
                words.cols(),
                self.config.word_dim
            )));
        }
        let target = if self.config.pad_to_max { self.config.max_tokens } else { 0 };
        let (x, valid) = pad_rows(words, target)?;
        let xv = g.constant(x)?;
        let nodes = self.word_attention.forward(g, store, xv, &valid)?;
        Ok((nodes, valid))
    }

    fn sentence_level(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        sentences: &Tensor,
        valid: Option<&[bool]>,
    ) -> Result<(AttentionNodes, Vec<bool>)> {
        if sentences.cols() != self.config.sentence_dim {
            return Err(Error::contract(format!(
                "sentence vectors have width {}, expected {}",
                sentences.cols(),
                self.config.sentence_dim
            )));
        }
        let (x, valid) = match valid {
            Some(v) => (sentences.clone(), v.to_vec()),
            None => {
                let target = if self.config.pad_to_max { self.config.max_sentences } else { 0 };
                pad_rows(sentences, target)?
            }
        };
        let xv = g.constant(x)?;
        let nodes = self.sentence_attention.forward(g, store, xv, &valid)?;
        Ok((nodes, valid))
    }

    /// `p′ = w̄ ⊕ FFN_s(mean S′) ⊕ FFN_p(p)`, with excluded blocks as zeros.
    fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        words: &[(Var, Vec<bool>)],
        sentences: (Var, &[bool]),
        post: Var,
        blocks: Blocks,
    ) -> Result<Var> {
        let h = self.config.hidden;
        let word_part = if blocks.word {
            let pooled = words
                .iter()
                .map(|(v, valid)| g.mean_rows(*v, &valid_rows(valid)))
                .collect::<Result<Vec<_>>>()?;
            let stacked = if pooled.len() == 1 {
                pooled[0]
            } else {
                g.concat_rows(&pooled)?
            };
            let all: Vec<usize> = (0..pooled.len()).collect();
            g.mean_rows(stacked, &all)?
        } else {
            g.constant(Tensor::zeros(&[1, self.config.word_dim]))?
        };
        let sentence_part = if blocks.sentence {
            let pooled = g.mean_rows(sentences.0, &valid_rows(sentences.1))?;
            self.sentence_ffn.forward(g, store, pooled)?
        } else {
            g.constant(Tensor::zeros(&[1, h]))?
        };
        let post_part = if blocks.post {
            if g.value(post).cols() != self.config.sentence_dim {
                return Err(Error::contract("post vector width differs from sentence_dim"));
            }
            self.post_ffn.forward(g, store, post)?
        } else {
            g.constant(Tensor::zeros(&[1, h]))?
        };
        g.concat_cols(&[word_part, sentence_part, post_part])
    }

    /// Records the full text branch for `post` on `g`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, post: &EmbeddedPost, blocks: Blocks) -> Result<TextNodes> {
        if post.words.is_empty() || post.words.len() != post.sentences.rows() {
            return Err(Error::contract(format!(
                "post {:?}: {} word matrices for {} sentence vectors",
                post.id,
                post.words.len(),
                post.sentences.rows()
            )));
        }
        let words = post
            .words
            .iter()
            .map(|w| self.word_level(g, store, w))
            .collect::<Result<Vec<_>>>()?;
        let sentences = self.sentence_level(g, store, &post.sentences, None)?;
        let pv = g.constant(post.post.clone())?;
        let word_refs: Vec<(Var, Vec<bool>)> = words.iter().map(|(n, v)| (n.output, v.clone())).collect();
        let p_prime = self.fuse(g, store, &word_refs, (sentences.0.output, &sentences.1), pv, blocks)?;
        Ok(TextNodes {
            p_prime,
            words,
            sentences,
        })
    }

    /// `W′_ij, Γ_W′_ij` for one sentence.
    pub fn encode_words(&self, store: &ParamStore, tokens: &[String], embedder: &WordEmbedder) -> Result<AttentionOutput> {
        let words = embed_tokens(tokens, embedder)?;
        let mut g = Graph::new();
        let (nodes, valid) = self.word_level(&mut g, store, &words)?;
        Ok(collect_output(&g, &nodes, &valid))
    }

    /// `S′_i, Γ_S′_i`. `valid` marks real sentences; `None` means all rows are real.
    pub fn encode_sentences(&self, store: &ParamStore, sentences: &Tensor, valid: Option<&[bool]>) -> Result<AttentionOutput> {
        let mut g = Graph::new();
        let (nodes, valid) = self.sentence_level(&mut g, store, sentences, valid)?;
        Ok(collect_output(&g, &nodes, &valid))
    }

    /// Builds `p′` from precomputed attention outputs and the post vector.
    pub fn fuse_levels(
        &self,
        store: &ParamStore,
        words: &[AttentionOutput],
        sentences: &AttentionOutput,
        post: &Tensor,
        blocks: Blocks,
    ) -> Result<Tensor> {
        if words.is_empty() {
            return Err(Error::contract("fuse_levels needs at least one sentence"));
        }
        if let Some(w) = words.iter().find(|w| w.representation.cols() != self.config.word_dim) {
            return Err(Error::contract(format!(
                "word representation width {} != {}",
                w.representation.cols(),
                self.config.word_dim
            )));
        }
        if sentences.representation.cols() != self.config.sentence_dim {
            return Err(Error::contract("sentence representation width mismatch"));
        }
        let mut g = Graph::new();
        let word_refs = words
            .iter()
            .map(|w| Ok((g.constant(w.representation.clone())?, w.valid.clone())))
            .collect::<Result<Vec<_>>>()?;
        let s = g.constant(sentences.representation.clone())?;
        let p = g.constant(post.clone())?;
        let out = self.fuse(&mut g, store, &word_refs, (s, &sentences.valid), p, blocks)?;
        Ok(g.value(out).clone())
    }

    /// Graph-free `p′` for a post.
    pub fn encode(&self, store: &ParamStore, post: &EmbeddedPost, blocks: Blocks) -> Result<Tensor> {
        let mut g = Graph::new();
        let nodes = self.forward(&mut g, store, post, blocks)?;
        Ok(g.value(nodes.p_prime).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Embedders;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (TextEncoder, ParamStore) {
        let cfg = TextEncoderConfig {
            word_dim: 6,
            sentence_dim: 8,
            hidden: 4,
            heads: 2,
            max_tokens: 5,
            max_sentences: 3,
            pad_to_max: false,
        };
        let enc = TextEncoder::new(cfg).unwrap();
        let mut s = ParamStore::new();
        enc.init(&mut s, &mut ChaCha8Rng::seed_from_u64(21));
        (enc, s)
    }

    fn post(sentence_rows: &[usize], seed: u64) -> EmbeddedPost {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let words: Vec<Tensor> = sentence_rows
            .iter()
            .map(|n| Tensor::uniform(&[*n, 6], 1.0, &mut rng))
            .collect();
        EmbeddedPost {
            id: "p".into(),
            label: Some(1),
            tokens: sentence_rows
                .iter()
                .map(|n| (0..*n).map(|i| format!("t{i}")).collect())
                .collect(),
            words,
            sentences: Tensor::uniform(&[sentence_rows.len(), 8], 1.0, &mut rng),
            post: Tensor::uniform(&[1, 8], 1.0, &mut rng),
        }
    }

    #[test]
    fn default_width_is_556() {
        let enc = TextEncoder::new(TextEncoderConfig::default()).unwrap();
        assert_eq!(enc.output_dim(), 300 + 128 + 128);
        assert_eq!(enc.word_attention.d_model, 296);
        assert_eq!(enc.sentence_attention.d_model, 768);
    }

    #[test]
    fn padded_word_matrix_has_max_tokens_rows() {
        let cfg = TextEncoderConfig {
            pad_to_max: true,
            ..TextEncoderConfig::default()
        };
        let enc = TextEncoder::new(cfg).unwrap();
        let mut s = ParamStore::new();
        enc.init(&mut s, &mut ChaCha8Rng::seed_from_u64(1));
        let emb = Embedders::synthetic(3);
        let toks: Vec<String> = ["i", "feel", "empty"].iter().map(|t| t.to_string()).collect();
        let out = enc.encode_words(&s, &toks, &emb.words).unwrap();
        assert_eq!(out.representation.shape(), &[64, 300]);
        assert_eq!(out.weights.shape(), &[8, 64, 64]);
        for h in 0..8 {
            for q in 0..64 {
                let row = out.row(h, q);
                assert!(row[3..].iter().all(|x| *x == 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn padding_does_not_change_the_representation() {
        let (enc, s) = small();
        let p = post(&[3, 1, 2], 4);
        let unpadded = enc.encode(&s, &p, Blocks::ALL).unwrap();
        let mut padded_enc = enc.clone();
        padded_enc.config.pad_to_max = true;
        let padded = padded_enc.encode(&s, &p, Blocks::ALL).unwrap();
        assert!(unpadded.max_abs_diff(&padded) < 1e-12);
    }

    #[test]
    fn one_token_sentence_attends_fully() {
        let (enc, s) = small();
        let emb = Embedders {
            words: WordEmbedder::synthetic(6, 0),
            sentences: crate::embedding::SentenceEmbedder::synthetic(8, 0),
        };
        let out = enc.encode_words(&s, &["alone".to_string()], &emb.words).unwrap();
        for h in 0..2 {
            assert_eq!(out.row(h, 0), &[1.0]);
        }
    }

    #[test]
    fn sentence_level_examples() {
        let (enc, s) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let one = Tensor::uniform(&[1, 8], 1.0, &mut rng);
        let out = enc.encode_sentences(&s, &one, None).unwrap();
        assert_eq!(out.row(0, 0), &[1.0]);
        let twin = Tensor::from_rows(&[one.row(0).to_vec(), one.row(0).to_vec()]).unwrap();
        let out = enc.encode_sentences(&s, &twin, None).unwrap();
        for h in 0..2 {
            for q in 0..2 {
                assert!((out.row(h, q)[0] - 0.5).abs() < 1e-12);
            }
        }
        let r = enc.encode_sentences(&s, &twin, Some(&[false, false]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn fuse_levels_locality() {
        let (enc, s) = small();
        let p = post(&[2, 3], 6);
        let mut zero_post = p.clone();
        zero_post.post = Tensor::zeros(&[1, 8]);
        let a = enc.encode(&s, &p, Blocks::ALL).unwrap();
        let b = enc.encode(&s, &zero_post, Blocks::ALL).unwrap();
        let [w, sr, pr] = enc.block_ranges();
        assert_eq!(a.data()[w.clone()], b.data()[w]);
        assert_eq!(a.data()[sr.clone()], b.data()[sr]);
        // FFN_p(0) = relu(bias)
        let bias = s.get("text.post_ffn.bias").unwrap().data();
        let expect: Vec<f64> = bias.iter().map(|x| x.max(0.0)).collect();
        assert_eq!(&b.data()[pr], expect.as_slice());
    }

    #[test]
    fn duplicating_the_only_sentence_keeps_word_mean() {
        let (enc, s) = small();
        let p = post(&[3], 7);
        let mut twice = p.clone();
        twice.words.push(p.words[0].clone());
        twice.tokens.push(p.tokens[0].clone());
        twice.sentences = Tensor::from_rows(&[p.sentences.row(0).to_vec(), p.sentences.row(0).to_vec()]).unwrap();
        let a = enc.encode(&s, &p, Blocks::ALL).unwrap();
        let b = enc.encode(&s, &twice, Blocks::ALL).unwrap();
        let [w, ..] = enc.block_ranges();
        for i in w {
            assert!((a.data()[i] - b.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_levels_matches_forward() {
        let (enc, s) = small();
        let p = post(&[2, 4], 8);
        let emb_words: Vec<AttentionOutput> = p
            .words
            .iter()
            .map(|w| enc.word_attention.apply(&s, w, &vec![true; w.rows()]).unwrap())
            .collect();
        let sent = enc.encode_sentences(&s, &p.sentences, None).unwrap();
        let fused = enc.fuse_levels(&s, &emb_words, &sent, &p.post, Blocks::ALL).unwrap();
        let direct = enc.encode(&s, &p, Blocks::ALL).unwrap();
        assert_eq!(fused.len(), enc.output_dim());
        assert!(fused.max_abs_diff(&direct) < 1e-12);
    }

    #[test]
    fn block_numbers() {
        assert_eq!(Blocks::from_numbers(&[1, 2, 3]).unwrap(), Blocks::ALL);
        assert_eq!(Blocks::from_numbers(&[2]).unwrap().numbers(), vec![2]);
        assert!(Blocks::from_numbers(&[]).is_err());
        assert!(Blocks::from_numbers(&[4]).is_err());
    }
}
