//! Post text: tokenization, word- and sentence-level attention, and the fused post representation.

mod attention;
mod encoder;
mod tokenize;

pub(crate) use attention::collect_output;
pub use attention::{multi_head_attention, AttentionNodes, AttentionOutput, MultiHeadAttention};
pub use encoder::{Blocks, EmbeddedPost, TextEncoder, TextEncoderConfig, TextNodes};
pub use tokenize::{split_sentences, tokenize, TokenizedPost};
