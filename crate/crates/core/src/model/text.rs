use rand::Rng;

use super::layers::{self, LayerShape};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::lm::{tokenize, VOCAB_SIZE};
use crate::numerics::{Graph, Real, Tensor, Var};
use crate::params::{Ctx, Group, GroupSet, Init, ParamStore};

pub(super) fn register<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    cfg: &ModelConfig,
) -> Result<()> {
    let g = Group::TextEncoder;
    let d = cfg.d_z;
    store.insert("text.tok", g, init.normal(VOCAB_SIZE, d, 1.0))?;
    store.insert("text.pos", g, init.normal(cfg.max_text_len, d, 0.5))?;
    let shape = LayerShape {
        d,
        heads: cfg.text_heads,
        hidden: 2 * d,
    };
    for l in 0..cfg.text_layers {
        layers::add_encoder_layer(store, init, &format!("text.l{l}"), shape, g, None)?;
    }
    layers::add_layer_norm(store, "text.ln_f", d, g)?;
    layers::add_affine(store, init, "text_head", d, d, Group::TextHead)
}

/// Mean-pooled text encoding, `1 x d_z`, not normalised. The similarity is
/// scale invariant in the text side, so losses use this directly.
pub fn encode_text_graph<T: Real>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, text: &str) -> Result<Var> {
    let ids = tokenize(text)?;
    if ids.is_empty() {
        return Err(Error::Input("cannot encode empty text".into()));
    }
    if ids.len() > cfg.max_text_len {
        return Err(Error::Length {
            len: ids.len(),
            max: cfg.max_text_len,
        });
    }
    let tok = ctx.p("text.tok")?;
    let x = ctx.g.gather(tok, &ids)?;
    let pos = ctx.p("text.pos")?;
    let pos = ctx.g.slice_rows(pos, 0, ids.len())?;
    let mut x = ctx.g.add(x, pos)?;
    for l in 0..cfg.text_layers {
        x = layers::encoder_layer(ctx, x, &format!("text.l{l}"), cfg.text_heads, false, None)?;
    }
    let x = ctx.layer_norm(x, "text.ln_f")?;
    ctx.g.segment_mean(x, ids.len())
}

/// Unit-norm text embedding `E`.
pub fn encode_text<T: Real>(store: &ParamStore<T>, cfg: &ModelConfig, text: &str) -> Result<Tensor<T>> {
    let mut ctx = Ctx::new(store, GroupSet::EMPTY);
    let e = encode_text_graph(&mut ctx, cfg, text)?;
    let v = ctx.g.value(e);
    let norm = v.sq_norm().sqrt();
    if norm.to_f64() == 0.0 {
        return Err(Error::NonFinite("text embedding has zero norm".into()));
    }
    Ok(v.map(|x| x / norm))
}

/// Head mapping periodic representations into the text embedding space.
pub fn text_head<T: Real>(ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
    ctx.affine(z, "text_head")
}

/// `g(Z, E)`: the largest cosine similarity between a row of `z` and each
/// row of `e`. Returns `1 x k` for `k` rows of `e`.
pub fn similarity_g<T: Real>(g: &mut Graph<T>, z: Var, e: Var) -> Result<Var> {
    let cos = g.cosine_sim(z, e)?;
    g.max_over_rows(cos)
}

pub fn similarity_values<T: Real>(z: &Tensor<T>, e: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let z = g.constant(z.clone())?;
    let e = g.constant(e.clone())?;
    let s = similarity_g(&mut g, z, e)?;
    Ok(g.value(s).data()[0])
}
