//! Decoder-only transformer over character ids and injected periodic tokens.

use rand::Rng;

use super::vocab::{COUNT_TOKENS, COUNT_TOKEN_BASE, EOS, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::model::layers::{self, LayerShape, LoraSpec};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Ctx, Group, GroupSet, Init, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct LmConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_l: usize,
    pub context_length: usize,
    pub ffn_hidden: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            layers: 4,
            heads: 4,
            d_l: 128,
            context_length: 256,
            ffn_hidden: 256,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_l % self.heads != 0 {
            return Err(Error::Config(format!(
                "lm width {} not divisible by {} heads",
                self.d_l, self.heads
            )));
        }
        if self.layers == 0 || self.context_length == 0 || self.ffn_hidden == 0 {
            return Err(Error::Config("lm layers, context and ffn width must be positive".into()));
        }
        Ok(())
    }
}

pub fn register<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    cfg: &LmConfig,
    lora: Option<(LoraSpec, Group)>,
    count_tokens: bool,
) -> Result<()> {
    let g = Group::LmBase;
    let d = cfg.d_l;
    store.insert("lm.tok", g, init.normal(VOCAB_SIZE, d, 0.5))?;
    store.insert("lm.pos", g, init.normal(cfg.context_length, d, 0.1))?;
    let shape = LayerShape {
        d,
        heads: cfg.heads,
        hidden: cfg.ffn_hidden,
    };
    for l in 0..cfg.layers {
        layers::add_encoder_layer(store, init, &format!("lm.l{l}"), shape, g, lora)?;
    }
    layers::add_layer_norm(store, "lm.ln_f", d, g)?;
    layers::add_affine(store, init, "lm.cls", d, VOCAB_SIZE, g)?;
    if count_tokens {
        let c = Group::CountTokens;
        store.insert("lm.count.emb", c, init.normal(COUNT_TOKENS, d, 0.5))?;
        layers::add_affine(store, init, "lm.count.cls", d, COUNT_TOKENS, c)?;
    }
    Ok(())
}

/// Input rows: optional periodic tokens followed by embedded ids, plus
/// positional embeddings.
pub fn embed<T: Real>(ctx: &mut Ctx<'_, T>, cfg: &LmConfig, periodic: Option<Var>, ids: &[usize]) -> Result<Var> {
    embed_at(ctx, cfg, periodic, ids, 0)
}

/// [`embed`] for rows placed at positions `offset..`.
pub(crate) fn embed_at<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &LmConfig,
    periodic: Option<Var>,
    ids: &[usize],
    offset: usize,
) -> Result<Var> {
    let n = periodic.map_or(0, |p| ctx.g.shape(p).0);
    let len = n + ids.len();
    if offset + len > cfg.context_length {
        return Err(Error::Length {
            len: offset + len,
            max: cfg.context_length,
        });
    }
    if len == 0 {
        return Err(Error::Input("empty language-model context".into()));
    }
    if let Some(p) = periodic {
        if ctx.g.shape(p).1 != cfg.d_l {
            return Err(Error::dim("embed", format!("periodic tokens {:?}, width {}", ctx.g.shape(p), cfg.d_l)));
        }
    }
    let mut parts: Vec<Var> = periodic.into_iter().collect();
    let mut start = 0;
    while start < ids.len() {
        let counted = ids[start] >= COUNT_TOKEN_BASE;
        let end = ids[start..]
            .iter()
            .position(|&i| (i >= COUNT_TOKEN_BASE) != counted)
            .map_or(ids.len(), |k| start + k);
        let run = &ids[start..end];
        let part = if counted {
            let table = ctx.p("lm.count.emb")?;
            let local: Vec<usize> = run.iter().map(|&i| i - COUNT_TOKEN_BASE).collect();
            ctx.g.gather(table, &local)?
        } else {
            let table = ctx.p("lm.tok")?;
            ctx.g.gather(table, run)?
        };
        parts.push(part);
        start = end;
    }
    let x = if parts.len() == 1 { parts[0] } else { ctx.g.concat_rows(&parts)? };
    let pos = ctx.p("lm.pos")?;
    let pos = ctx.g.slice_rows(pos, offset, len)?;
    ctx.g.add(x, pos)
}

/// Final-normed hidden states, one row per context position.
pub fn lm_hidden<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &LmConfig,
    periodic: Option<Var>,
    ids: &[usize],
    lora_scale: Option<f64>,
) -> Result<Var> {
    let mut x = embed(ctx, cfg, periodic, ids)?;
    for l in 0..cfg.layers {
        x = layers::encoder_layer(ctx, x, &format!("lm.l{l}"), cfg.heads, true, lora_scale)?;
    }
    ctx.layer_norm(x, "lm.ln_f")
}

/// Classifier logits for the given rows of `hidden`. With count tokens the
/// output has `VOCAB_SIZE + COUNT_TOKENS` columns.
pub fn logits_at<T: Real>(ctx: &mut Ctx<'_, T>, hidden: Var, positions: &[usize]) -> Result<Var> {
    let (rows, _) = ctx.g.shape(hidden);
    let h = if positions.len() == rows && positions.iter().enumerate().all(|(i, &p)| i == p) {
        hidden
    } else {
        ctx.g.gather(hidden, positions)?
    };
    let base = ctx.affine(h, "lm.cls")?;
    if ctx.has("lm.count.cls.w") {
        let extra = ctx.affine(h, "lm.count.cls")?;
        ctx.g.concat_cols(&[base, extra])
    } else {
        Ok(base)
    }
}

/// Logits at every position, `len x vocab`.
pub fn lm_forward<T: Real>(
    ctx: &mut Ctx<'_, T>,
    cfg: &LmConfig,
    periodic: Option<Var>,
    ids: &[usize],
    lora_scale: Option<f64>,
) -> Result<Var> {
    let h = lm_hidden(ctx, cfg, periodic, ids, lora_scale)?;
    let rows: Vec<usize> = (0..ctx.g.shape(h).0).collect();
    logits_at(ctx, h, &rows)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding after `prompt`, stopping at EOS (not included) or after
/// `max_len` symbols.
pub fn generate<T: Real>(
    store: &ParamStore<T>,
    cfg: &LmConfig,
    periodic: Option<&Tensor<T>>,
    prompt: &[usize],
    max_len: usize,
    lora_scale: Option<f64>,
) -> Result<Vec<usize>> {
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    let n = periodic.map_or(0, |p| p.rows());
    while out.len() < max_len && n + ids.len() < cfg.context_length {
        let mut ctx = Ctx::new(store, GroupSet::EMPTY);
        let p = periodic.map(|p| ctx.g.constant(p.clone())).transpose()?;
        let h = lm_hidden(&mut ctx, cfg, p, &ids, lora_scale)?;
        let last = ctx.g.shape(h).0 - 1;
        let logits = logits_at(&mut ctx, h, &[last])?;
        let next = argmax(ctx.g.value(logits).data());
        if next == EOS {
            break;
        }
        out.push(next);
        ids.push(next);
    }
    Ok(out)
}
