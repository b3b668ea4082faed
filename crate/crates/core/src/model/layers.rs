//! Shared building blocks: affine layers, low-rank adapters, multi-head
//! attention, and pre-norm transformer layers.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{attention, Graph, Real, Tensor, Var};
use crate::params::{Ctx, Group, Init, ParamStore};

pub fn add_affine<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    group: Group,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), group, init.dense(d_in, d_out))?;
    store.insert(format!("{prefix}.b"), group, Tensor::zeros(&[1, d_out]))?;
    Ok(())
}

pub fn add_layer_norm<T: Real>(store: &mut ParamStore<T>, prefix: &str, d: usize, group: Group) -> Result<()> {
    store.insert(format!("{prefix}.g"), group, Tensor::full(&[1, d], T::ONE))?;
    store.insert(format!("{prefix}.b"), group, Tensor::zeros(&[1, d]))?;
    Ok(())
}

/// Low-rank bypass `scale * (x A) B` on a `d_in -> d_out` layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter<T> {
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub scale: T,
}

impl<T: Real> LowRankAdapter<T> {
    /// `A` drawn from `init`, `B` zero so the adapted layer starts equal to
    /// its base.
    pub fn new<R: Rng>(init: &mut Init<'_, R>, d_in: usize, d_out: usize, rank: usize, scale: f64) -> Result<Self> {
        check_rank(d_in, d_out, rank)?;
        Ok(LowRankAdapter {
            a: init.dense(d_in, rank),
            b: Tensor::zeros(&[rank, d_out]),
            scale: T::from_f64(scale),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }
}

pub fn check_rank(d_in: usize, d_out: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > d_in.min(d_out) {
        return Err(Error::Config(format!(
            "adapter rank {rank} must be in 1..={} for a {d_in}x{d_out} layer",
            d_in.min(d_out)
        )));
    }
    Ok(())
}

/// `x W + b + scale * (x A) B` on the graph.
pub fn apply_adapter<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    w: Var,
    b: Var,
    a: Var,
    bb: Var,
    scale: T,
) -> Result<Var> {
    let base = g.matmul(x, w)?;
    let base = g.add_row(base, b)?;
    let low = g.matmul(x, a)?;
    let low = g.matmul_ext(low, bb, false, false, scale)?;
    g.add(base, low)
}

/// Value-level form of [`apply_adapter`].
pub fn apply_adapter_values<T: Real>(
    w: &Tensor<T>,
    b: &Tensor<T>,
    adapter: &LowRankAdapter<T>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_rank(w.rows(), w.cols(), adapter.rank())?;
    let mut g = Graph::new();
    let x = g.constant(x.clone())?;
    let w = g.constant(w.clone())?;
    let b = g.constant(b.clone())?;
    let a = g.constant(adapter.a.clone())?;
    let bb = g.constant(adapter.b.clone())?;
    let y = apply_adapter(&mut g, x, w, b, a, bb, adapter.scale)?;
    Ok(g.value(y).clone())
}

/// Adapter settings for attention projections.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoraSpec {
    pub rank: usize,
    pub scale: f64,
}

pub fn add_lora<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    prefix: &str,
    d_in: usize,
    d_out: usize,
    lora: LoraSpec,
    group: Group,
) -> Result<()> {
    let ad = LowRankAdapter::<T>::new(init, d_in, d_out, lora.rank, lora.scale)?;
    store.insert(format!("{prefix}.lora_a"), group, ad.a)?;
    store.insert(format!("{prefix}.lora_b"), group, ad.b)?;
    Ok(())
}

/// Affine projection that picks up `{prefix}.lora_a/b` when they exist and
/// `lora_scale` is set.
pub fn projection<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, prefix: &str, lora_scale: Option<f64>) -> Result<Var> {
    let a_name = format!("{prefix}.lora_a");
    match lora_scale {
        Some(scale) if ctx.has(&a_name) => {
            let w = ctx.p(&format!("{prefix}.w"))?;
            let b = ctx.p(&format!("{prefix}.b"))?;
            let a = ctx.p(&a_name)?;
            let bb = ctx.p(&format!("{prefix}.lora_b"))?;
            apply_adapter(&mut ctx.g, x, w, b, a, bb, T::from_f64(scale))
        }
        _ => ctx.affine(x, prefix),
    }
}

/// Registers `{prefix}.{q,k,v,o}` and, when `lora` is given, their adapters.
pub fn add_attention<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    prefix: &str,
    d: usize,
    d_kv: usize,
    group: Group,
    lora: Option<(LoraSpec, Group)>,
) -> Result<()> {
    for (name, d_in) in [("q", d), ("k", d_kv), ("v", d_kv), ("o", d)] {
        let p = format!("{prefix}.{name}");
        add_affine(store, init, &p, d_in, d, group)?;
        if let Some((spec, g)) = lora {
            add_lora(store, init, &p, d_in, d, spec, g)?;
        }
    }
    Ok(())
}

/// Multi-head attention of `xq` over `xkv`.
pub fn multi_head<T: Real>(
    ctx: &mut Ctx<'_, T>,
    xq: Var,
    xkv: Var,
    prefix: &str,
    heads: usize,
    causal: bool,
    lora_scale: Option<f64>,
) -> Result<Var> {
    let q = projection(ctx, xq, &format!("{prefix}.q"), lora_scale)?;
    let k = projection(ctx, xkv, &format!("{prefix}.k"), lora_scale)?;
    let v = projection(ctx, xkv, &format!("{prefix}.v"), lora_scale)?;
    let d = ctx.g.shape(q).1;
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let out = if heads == 1 {
        attention(&mut ctx.g, q, k, v, causal)?
    } else {
        let mut parts = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = ctx.g.slice_cols(q, h * dh, dh)?;
            let kh = ctx.g.slice_cols(k, h * dh, dh)?;
            let vh = ctx.g.slice_cols(v, h * dh, dh)?;
            parts.push(attention(&mut ctx.g, qh, kh, vh, causal)?);
        }
        ctx.g.concat_cols(&parts)?
    };
    projection(ctx, out, &format!("{prefix}.o"), lora_scale)
}

pub fn add_ffn<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    prefix: &str,
    d: usize,
    hidden: usize,
    group: Group,
) -> Result<()> {
    add_affine(store, init, &format!("{prefix}.up"), d, hidden, group)?;
    add_affine(store, init, &format!("{prefix}.down"), hidden, d, group)
}

pub fn ffn<T: Real>(ctx: &mut Ctx<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let h = ctx.affine(x, &format!("{prefix}.up"))?;
    let h = ctx.g.gelu(h)?;
    ctx.affine(h, &format!("{prefix}.down"))
}

/// Shape of a pre-norm self-attention layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerShape {
    pub d: usize,
    pub heads: usize,
    pub hidden: usize,
}

pub fn add_encoder_layer<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    prefix: &str,
    shape: LayerShape,
    group: Group,
    lora: Option<(LoraSpec, Group)>,
) -> Result<()> {
    add_layer_norm(store, &format!("{prefix}.ln1"), shape.d, group)?;
    add_attention(store, init, &format!("{prefix}.attn"), shape.d, shape.d, group, lora)?;
    add_layer_norm(store, &format!("{prefix}.ln2"), shape.d, group)?;
    add_ffn(store, init, &format!("{prefix}.ffn"), shape.d, shape.hidden, group)
}

/// `x + attn(ln1(x))`, then `+ ffn(ln2(.))`.
pub fn encoder_layer<T: Real>(
    ctx: &mut Ctx<'_, T>,
    x: Var,
    prefix: &str,
    heads: usize,
    causal: bool,
    lora_scale: Option<f64>,
) -> Result<Var> {
    let h = ctx.layer_norm(x, &format!("{prefix}.ln1"))?;
    let a = multi_head(ctx, h, h, &format!("{prefix}.attn"), heads, causal, lora_scale)?;
    let x = ctx.g.add(x, a)?;
    let h = ctx.layer_norm(x, &format!("{prefix}.ln2"))?;
    let f = ffn(ctx, h, &format!("{prefix}.ffn"))?;
    ctx.g.add(x, f)
}
