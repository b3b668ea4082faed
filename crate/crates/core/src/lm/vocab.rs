//! Character vocabulary.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Placeholder symbol for positions that carry injected periodic tokens.
pub const PERIODIC_SLOT: usize = 3;

const SPECIAL_NAMES: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<periodic>"];
const SYMBOLS: &str = " abcdefghijklmnopqrstuvwxyz0123456789[],.?:-";

pub const VOCAB_SIZE: usize = SPECIAL_NAMES.len() + SYMBOLS.len();

/// First id of the optional learned count tokens `<0000>..<9999>`.
pub const COUNT_TOKEN_BASE: usize = VOCAB_SIZE;
pub const COUNT_TOKENS: usize = 10_000;

pub fn id_of(ch: char) -> Option<usize> {
    SYMBOLS.find(ch).map(|i| SPECIAL_NAMES.len() + i)
}

/// Printable form of an id. Special and count tokens render in angle
/// brackets.
pub fn symbol(id: usize) -> String {
    if id < SPECIAL_NAMES.len() {
        SPECIAL_NAMES[id].to_string()
    } else if id < VOCAB_SIZE {
        SYMBOLS[id - SPECIAL_NAMES.len()..].chars().next().unwrap().to_string()
    } else if id < COUNT_TOKEN_BASE + COUNT_TOKENS {
        format!("<{:04}>", id - COUNT_TOKEN_BASE)
    } else {
        format!("<unk:{id}>")
    }
}

/// Lowercases `text` and maps each character to one id.
pub fn tokenize(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .flat_map(char::to_lowercase)
        .enumerate()
        .map(|(position, ch)| id_of(ch).ok_or(Error::Tokenize { ch, position }))
        .collect()
}

pub fn detokenize(ids: &[usize]) -> String {
    ids.iter().map(|&id| symbol(id)).collect()
}
