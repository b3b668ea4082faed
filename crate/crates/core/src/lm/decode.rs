//! Greedy decoding with cached keys and values.

use super::transformer::{embed_at, logits_at, LmConfig};
use super::vocab::EOS;
use crate::error::{Error, Result};
use crate::model::layers::{ffn, projection};
use crate::numerics::{attention, Real, Tensor, Var};
use crate::params::{Ctx, GroupSet, ParamStore};

struct LayerCache<T> {
    k: Tensor<T>,
    v: Tensor<T>,
}

/// Incremental forward pass over a growing context.
pub struct KvDecoder<'a, T: Real> {
    store: &'a ParamStore<T>,
    cfg: &'a LmConfig,
    lora_scale: Option<f64>,
    cache: Vec<LayerCache<T>>,
    len: usize,
}

impl<'a, T: Real> KvDecoder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, cfg: &'a LmConfig, lora_scale: Option<f64>) -> Self {
        KvDecoder {
            store,
            cfg,
            lora_scale,
            cache: Vec::new(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `periodic` rows (first call only) and `ids`, returning the
    /// logits of the last appended position.
    pub fn feed(&mut self, periodic: Option<&Tensor<T>>, ids: &[usize]) -> Result<Tensor<T>> {
        if periodic.is_some() && self.len > 0 {
            return Err(Error::Input("periodic tokens must open the context".into()));
        }
        let n = periodic.map_or(0, |p| p.rows()) + ids.len();
        if n == 0 {
            return Err(Error::Input("nothing to feed".into()));
        }
        let mut ctx = Ctx::new(self.store, GroupSet::EMPTY);
        let p = periodic.map(|p| ctx.g.constant(p.clone())).transpose()?;
        let mut x = embed_at(&mut ctx, self.cfg, p, ids, self.len)?;
        let first = self.cache.is_empty();
        for l in 0..self.cfg.layers {
            let prefix = format!("lm.l{l}");
            let h = ctx.layer_norm(x, &format!("{prefix}.ln1"))?;
            let a = self.attend(&mut ctx, h, &format!("{prefix}.attn"), l, first)?;
            x = ctx.g.add(x, a)?;
            let h = ctx.layer_norm(x, &format!("{prefix}.ln2"))?;
            let f = ffn(&mut ctx, h, &format!("{prefix}.ffn"))?;
            x = ctx.g.add(x, f)?;
        }
        let h = ctx.layer_norm(x, "lm.ln_f")?;
        let last = ctx.g.shape(h).0 - 1;
        let logits = logits_at(&mut ctx, h, &[last])?;
        self.len += n;
        Ok(ctx.g.value(logits).clone())
    }

    fn attend(&mut self, ctx: &mut Ctx<'_, T>, h: Var, prefix: &str, layer: usize, first: bool) -> Result<Var> {
        let q = projection(ctx, h, &format!("{prefix}.q"), self.lora_scale)?;
        let k_new = projection(ctx, h, &format!("{prefix}.k"), self.lora_scale)?;
        let v_new = projection(ctx, h, &format!("{prefix}.v"), self.lora_scale)?;
        let (k, v) = if first {
            (k_new, v_new)
        } else {
            let c = &self.cache[layer];
            let kc = ctx.g.constant(c.k.clone())?;
            let vc = ctx.g.constant(c.v.clone())?;
            (ctx.g.concat_rows(&[kc, k_new])?, ctx.g.concat_rows(&[vc, v_new])?)
        };
        let cache = LayerCache {
            k: ctx.g.value(k).clone(),
            v: ctx.g.value(v).clone(),
        };
        if first {
            self.cache.push(cache);
        } else {
            self.cache[layer] = cache;
        }
        let rows = ctx.g.shape(q).0;
        let past = ctx.g.shape(k).0 - rows;
        let d = ctx.g.shape(q).1;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let mut parts = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = ctx.g.slice_cols(q, hd * dh, dh)?;
            let kh = ctx.g.slice_cols(k, hd * dh, dh)?;
            let vh = ctx.g.slice_cols(v, hd * dh, dh)?;
            // a single new row sees the whole cache; a fresh block is causal
            let causal = past == 0 && rows > 1;
            if past > 0 && rows > 1 {
                return Err(Error::Input("multi-row feed after the first must be one symbol at a time".into()));
            }
            parts.push(attention(&mut ctx.g, qh, kh, vh, causal)?);
        }
        let out = if parts.len() == 1 { parts[0] } else { ctx.g.concat_cols(&parts)? };
        projection(ctx, out, &format!("{prefix}.o"), self.lora_scale)
    }
}

/// Greedy decoding after `prompt` with a key/value cache. Produces the same
/// symbols as [`super::generate`] up to floating-point reassociation.
pub fn generate_cached<T: Real>(
    store: &ParamStore<T>,
    cfg: &LmConfig,
    periodic: Option<&Tensor<T>>,
    prompt: &[usize],
    max_len: usize,
    lora_scale: Option<f64>,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    if max_len == 0 {
        return Ok(out);
    }
    let n = periodic.map_or(0, |p| p.rows());
    if n + prompt.len() >= cfg.context_length {
        return Ok(out);
    }
    let mut dec = KvDecoder::new(store, cfg, lora_scale);
    let mut logits = dec.feed(periodic, prompt)?;
    loop {
        let next = super::argmax(logits.data());
        if next == EOS {
            break;
        }
        out.push(next);
        if out.len() >= max_len || dec.len() + 1 >= cfg.context_length {
            break;
        }
        logits = dec.feed(None, &[next])?;
    }
    Ok(out)
}
