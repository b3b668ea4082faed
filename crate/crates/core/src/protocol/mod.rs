//! Instruction template, the `[abcd,e,f]` answer codec, and clip-to-video
//! count reconciliation.

use std::fmt;

use crate::error::{Error, Result};
use crate::lm::{detokenize, tokenize, COUNT_TOKENS, COUNT_TOKEN_BASE};
use crate::synthdata::ClipLabel;

/// Version tag of [`DESCRIPTION`], recorded with checkpoints.
pub const DESCRIPTION_VERSION: u32 = 1;

/// Class-agnostic definition of repetitive motion placed before every
/// question.
pub const DESCRIPTION: &str =
    "a repetitive action is any motion that recurs at roughly regular intervals, each cycle looking much like the last.";

pub const QUESTIONS: [&str; 3] = [
    "how many times is the action repeated in this clip?",
    "how many repetitions of the motion does this clip contain?",
    "what is the number of action cycles in this clip?",
];

/// Symbols in a canonical answer.
pub const ANSWER_LEN: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstructionRecord {
    pub periodic_slot_count: usize,
    /// Empty when the description is switched off.
    pub description: String,
    pub question: String,
    pub answer: Option<String>,
}

impl InstructionRecord {
    /// Text following the periodic tokens, without the answer.
    pub fn prompt_text(&self) -> String {
        if self.description.is_empty() {
            self.question.clone()
        } else {
            format!("{} {}", self.description, self.question)
        }
    }
}

pub fn build_instruction(variant: usize, periodic_slot_count: usize, with_description: bool) -> Result<InstructionRecord> {
    let question = QUESTIONS
        .get(variant)
        .ok_or_else(|| Error::Input(format!("unknown question variant {variant}, have {}", QUESTIONS.len())))?;
    Ok(InstructionRecord {
        periodic_slot_count,
        description: if with_description { DESCRIPTION.to_string() } else { String::new() },
        question: question.to_string(),
        answer: None,
    })
}

/// A clip-level answer: count plus start/end incomplete-cycle flags.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ClipAnswer {
    pub count: u32,
    pub e: bool,
    pub f: bool,
}

impl ClipAnswer {
    pub const MAX_COUNT: u32 = 9999;

    pub fn new(count: u32, e: bool, f: bool) -> Self {
        ClipAnswer { count, e, f }
    }
}

impl From<ClipLabel> for ClipAnswer {
    fn from(l: ClipLabel) -> Self {
        ClipAnswer {
            count: l.clip_count,
            e: l.start_incomplete,
            f: l.end_incomplete,
        }
    }
}

impl fmt::Display for ClipAnswer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{:04},{},{}]", self.count, self.e as u8, self.f as u8)
    }
}

pub fn encode_answer(a: ClipAnswer) -> Result<String> {
    if a.count > ClipAnswer::MAX_COUNT {
        return Err(Error::Range(format!("count {} above {}", a.count, ClipAnswer::MAX_COUNT)));
    }
    Ok(a.to_string())
}

/// Strict inverse of [`encode_answer`]; surrounding whitespace is ignored.
pub fn decode_answer(text: &str) -> Result<ClipAnswer> {
    let fail = || Error::Parse(text.to_string());
    let b = text.trim().as_bytes();
    if b.len() != ANSWER_LEN || b[0] != b'[' || b[5] != b',' || b[7] != b',' || b[9] != b']' {
        return Err(fail());
    }
    let mut count = 0u32;
    for &d in &b[1..5] {
        if !d.is_ascii_digit() {
            return Err(fail());
        }
        count = count * 10 + (d - b'0') as u32;
    }
    let flag = |c: u8| match c {
        b'0' => Ok(false),
        b'1' => Ok(true),
        _ => Err(fail()),
    };
    Ok(ClipAnswer {
        count,
        e: flag(b[6])?,
        f: flag(b[8])?,
    })
}

/// Video-level count: clip counts plus one for every boundary where a clip
/// ends mid-cycle and the next one starts mid-cycle.
pub fn reconcile_counts(answers: &[ClipAnswer]) -> Result<u64> {
    if answers.is_empty() {
        return Err(Error::Input("no clip answers to reconcile".into()));
    }
    let counts: u64 = answers.iter().map(|a| a.count as u64).sum();
    let joins = answers.windows(2).filter(|w| w[0].f && w[1].e).count() as u64;
    Ok(counts + joins)
}

/// How answers are spelled as language-model symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnswerTokens {
    /// `[abcd,e,f]` with one symbol per character.
    Decimal,
    /// The four digits replaced by a single learned count token.
    Learned,
}

/// Target symbols for `a`, without the end marker.
pub fn answer_ids(a: ClipAnswer, mode: AnswerTokens) -> Result<Vec<usize>> {
    let text = encode_answer(a)?;
    match mode {
        AnswerTokens::Decimal => tokenize(&text),
        AnswerTokens::Learned => {
            let mut ids = tokenize("[")?;
            ids.push(COUNT_TOKEN_BASE + a.count as usize);
            ids.extend(tokenize(&text[5..])?);
            Ok(ids)
        }
    }
}

/// Answer text of generated symbols; a count token reads as its four
/// digits. The result still has to pass [`decode_answer`].
pub fn answer_text(ids: &[usize]) -> String {
    let mut s = String::new();
    for &id in ids {
        if (COUNT_TOKEN_BASE..COUNT_TOKEN_BASE + COUNT_TOKENS).contains(&id) {
            s.push_str(&format!("{:04}", id - COUNT_TOKEN_BASE));
        } else {
            s.push_str(&detokenize(&[id]));
        }
    }
    s
}
