//! Language-model warm-up on instruction-shaped text.
//!
//! Stands in for a pretrained language model: the base weights learn the
//! prompt text and the answer grammar before they are frozen. Periodic
//! positions are filled with the slot symbol's embedding.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transformer::{lm_hidden, logits_at, LmConfig};
use super::vocab::{tokenize, BOS, EOS, PERIODIC_SLOT};
use crate::error::Result;
use crate::numerics::Real;
use crate::params::{Group, GroupSet, ParamStore};
use crate::protocol::{build_instruction, encode_answer, ClipAnswer, QUESTIONS};
use crate::training::{optimizer_step, per_example_grads, AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub sequences: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            sequences: 2048,
            epochs: 1,
            batch: 16,
            lr: 1e-3,
            seed: 7,
        }
    }
}

/// Token sequences `slots, BOS, prompt, answer, EOS`, with a random question
/// variant, description on or off, and a random well-formed answer.
pub fn pretrain_corpus(n: usize, n_slots: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let variant = rng.random_range(0..QUESTIONS.len());
            let rec = build_instruction(variant, n_slots, rng.random_bool(0.8))?;
            let count = if rng.random_bool(0.5) {
                rng.random_range(0..=20)
            } else {
                rng.random_range(0..=ClipAnswer::MAX_COUNT)
            };
            let answer = encode_answer(ClipAnswer::new(count, rng.random(), rng.random()))?;
            let mut ids = vec![PERIODIC_SLOT; n_slots];
            ids.push(BOS);
            ids.extend(tokenize(&rec.prompt_text())?);
            ids.extend(tokenize(&answer)?);
            ids.push(EOS);
            Ok(ids)
        })
        .collect()
}

/// Next-symbol training of the base weights on [`pretrain_corpus`]. Returns
/// the mean loss per step.
pub fn pretrain_lm<T: Real>(
    store: &mut ParamStore<T>,
    cfg: &LmConfig,
    n_slots: usize,
    pc: &PretrainConfig,
) -> Result<Vec<f64>> {
    let corpus = pretrain_corpus(pc.sequences, n_slots, pc.seed)?;
    let trainable = GroupSet::of(&[Group::LmBase]);
    let adam = AdamConfig::with_lr(pc.lr);
    let mut state = AdamState::new(store.len());
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed ^ 0x5eed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut trace = Vec::new();
    for _ in 0..pc.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(pc.batch.max(1)) {
            let (loss, mut grads) = per_example_grads(store, trainable, batch.len(), |ctx, i| {
                let seq = &corpus[batch[i]];
                let input = &seq[..seq.len() - 1];
                let h = lm_hidden(ctx, cfg, None, input, None)?;
                // predict everything after BOS
                let positions: Vec<usize> = (n_slots..input.len()).collect();
                let logits = logits_at(ctx, h, &positions)?;
                let targets = &seq[n_slots + 1..];
                let l = ctx.g.softmax_cross_entropy(logits, targets)?;
                ctx.g.scale(l, T::from_f64(1.0 / targets.len() as f64))
            })?;
            let inv = 1.0 / batch.len() as f64;
            grads.scale(T::from_f64(inv));
            optimizer_step(store, &grads, &mut state, &adam)?;
            trace.push(loss * inv);
        }
    }
    Ok(trace)
}
