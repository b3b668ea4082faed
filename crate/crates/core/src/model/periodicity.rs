use rand::Rng;

use super::layers;
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Var};
use crate::params::{Ctx, Group, Init, ParamStore};

pub(super) fn register<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    cfg: &ModelConfig,
) -> Result<()> {
    let g = Group::Periodicity;
    let d = cfg.d_z;
    layers::add_affine(store, init, "per.feat", cfg.d_v, d, g)?;
    if cfg.feature_pos {
        store.insert("per.feat_pos", g, init.normal(cfg.m, d, 0.5))?;
    }
    store.insert("per.queries", g, init.normal(cfg.n_queries, d, 1.0))?;
    for l in 0..cfg.periodicity_layers {
        let p = format!("per.l{l}");
        layers::add_layer_norm(store, &format!("{p}.ln_sa"), d, g)?;
        layers::add_attention(store, init, &format!("{p}.sa"), d, d, g, None)?;
        layers::add_layer_norm(store, &format!("{p}.ln_ca"), d, g)?;
        layers::add_layer_norm(store, &format!("{p}.ln_kv"), d, g)?;
        layers::add_attention(store, init, &format!("{p}.ca"), d, d, g, None)?;
        layers::add_layer_norm(store, &format!("{p}.ln_ff"), d, g)?;
        layers::add_ffn(store, init, &format!("{p}.ffn"), d, 2 * d, g)?;
    }
    layers::add_layer_norm(store, "per.ln_f", d, g)
}

/// Learnable queries attend to the features: per layer, query
/// self-attention, cross-attention to `features`, then a feed-forward block,
/// each pre-normed with a residual. Returns `n x d_z`.
pub fn extract_periodicity<T: Real>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, features: Var) -> Result<Var> {
    let (m, d_v) = ctx.g.shape(features);
    if d_v != cfg.d_v || (cfg.feature_pos && m != cfg.m) {
        return Err(Error::dim(
            "extract_periodicity",
            format!("features {:?}, expected {}x{}", (m, d_v), cfg.m, cfg.d_v),
        ));
    }
    let mut f = ctx.affine(features, "per.feat")?;
    if cfg.feature_pos {
        let pos = ctx.p("per.feat_pos")?;
        f = ctx.g.add(f, pos)?;
    }
    let mut z = ctx.p("per.queries")?;
    let heads = cfg.periodicity_heads;
    for l in 0..cfg.periodicity_layers {
        let p = format!("per.l{l}");
        let h = ctx.layer_norm(z, &format!("{p}.ln_sa"))?;
        let a = layers::multi_head(ctx, h, h, &format!("{p}.sa"), heads, false, None)?;
        z = ctx.g.add(z, a)?;
        let h = ctx.layer_norm(z, &format!("{p}.ln_ca"))?;
        let kv = ctx.layer_norm(f, &format!("{p}.ln_kv"))?;
        let a = layers::multi_head(ctx, h, kv, &format!("{p}.ca"), heads, false, None)?;
        z = ctx.g.add(z, a)?;
        let h = ctx.layer_norm(z, &format!("{p}.ln_ff"))?;
        let a = layers::ffn(ctx, h, &format!("{p}.ffn"))?;
        z = ctx.g.add(z, a)?;
    }
    ctx.layer_norm(z, "per.ln_f")
}

/// Row-wise affine map into the language model's embedding width.
pub fn project_tokens<T: Real>(ctx: &mut Ctx<'_, T>, z: Var) -> Result<Var> {
    ctx.affine(z, "proj")
}
