//! Small decoder-only language model with a character vocabulary.

mod decode;
mod pretrain;
mod transformer;
mod vocab;

pub use decode::{generate_cached, KvDecoder};
pub use pretrain::{pretrain_corpus, pretrain_lm, PretrainConfig};
pub use transformer::{argmax, embed, generate, lm_forward, lm_hidden, logits_at, register, LmConfig};
pub use vocab::{
    detokenize, id_of, symbol, tokenize, BOS, COUNT_TOKENS, COUNT_TOKEN_BASE, EOS, PAD, PERIODIC_SLOT, VOCAB_SIZE,
};

#[cfg(test)]
mod tests;
