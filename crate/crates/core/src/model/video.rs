use rand::Rng;

use super::layers::{self, LayerShape, LoraSpec};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Ctx, Group, Init, ParamStore};

pub(super) fn register<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    init: &mut Init<'_, R>,
    cfg: &ModelConfig,
    lora: Option<(LoraSpec, Group)>,
) -> Result<()> {
    let g = Group::VideoEncoder;
    let d = cfg.d_v;
    layers::add_affine(store, init, "video.patch", cfg.patch * cfg.patch, d, g)?;
    store.insert("video.patch_pos", g, init.normal(cfg.patches_per_frame(), d, 0.5))?;
    store.insert("video.time_pos", g, init.normal(cfg.max_frames, d, 0.02))?;
    let shape = LayerShape {
        d,
        heads: cfg.video_heads,
        hidden: 2 * d,
    };
    for l in 0..cfg.video_layers {
        layers::add_encoder_layer(store, init, &format!("video.l{l}"), shape, g, lora)?;
    }
    layers::add_layer_norm(store, "video.ln_f", d, g)
}

/// Rearranges a `t x (h*w)` clip into `(t*p) x (patch*patch)` rows, frame
/// by frame, patches in raster order.
pub fn patchify<T: Real>(clip: &Tensor<T>, frame_size: usize, patch: usize) -> Result<Tensor<T>> {
    let (t, hw) = (clip.rows(), clip.cols());
    if hw != frame_size * frame_size || frame_size % patch != 0 {
        return Err(Error::dim(
            "patchify",
            format!("clip {:?} for {frame_size}x{frame_size} frames", clip.shape()),
        ));
    }
    let per_side = frame_size / patch;
    let mut out = Vec::with_capacity(t * hw);
    for f in 0..t {
        let frame = clip.row(f);
        for py in 0..per_side {
            for px in 0..per_side {
                for y in 0..patch {
                    let start = (py * patch + y) * frame_size + px * patch;
                    out.extend_from_slice(&frame[start..start + patch]);
                }
            }
        }
    }
    Tensor::new(vec![t * per_side * per_side, patch * patch], out)
}

/// `m x t` adaptive average pooling matrix: row `i` averages frames
/// `floor(i t / m) .. ceil((i + 1) t / m)`.
pub fn pool_matrix<T: Real>(m: usize, t: usize) -> Tensor<T> {
    let mut data = vec![T::ZERO; m * t];
    for i in 0..m {
        let lo = i * t / m;
        let hi = ((i + 1) * t).div_ceil(m).max(lo + 1);
        let w = T::from_f64(1.0 / (hi - lo) as f64);
        for j in lo..hi {
            data[i * t + j] = w;
        }
    }
    Tensor::new(vec![m, t], data).expect("sized")
}

/// `t x (h*w)` clip to `m x d_v` features: per-frame patch embedding, mean
/// over patches, temporal centring, then the temporal encoder and pooling.
pub fn encode_video<T: Real>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, clip: &Tensor<T>) -> Result<Var> {
    let t = clip.rows();
    if clip.rank() != 2 || t == 0 || t > cfg.max_frames || clip.cols() != cfg.frame_size * cfg.frame_size {
        return Err(Error::dim(
            "encode_video",
            format!(
                "clip {:?}, expected up to {} frames of {} pixels",
                clip.shape(),
                cfg.max_frames,
                cfg.frame_size * cfg.frame_size
            ),
        ));
    }
    let p = cfg.patches_per_frame();
    let patches = ctx.g.constant(patchify(clip, cfg.frame_size, cfg.patch)?)?;
    let x = ctx.affine(patches, "video.patch")?;
    let pos = ctx.p("video.patch_pos")?;
    let ids: Vec<usize> = (0..t * p).map(|i| i % p).collect();
    let pos = ctx.g.gather(pos, &ids)?;
    let x = ctx.g.add(x, pos)?;
    let x = ctx.g.gelu(x)?;
    let x = ctx.g.segment_mean(x, p)?;
    // subtract the clip's mean frame so frame-to-frame changes, not the
    // static background, dominate after normalisation
    let mean = ctx.g.segment_mean(x, t)?;
    let mean = ctx.g.gather(mean, &vec![0; t])?;
    let mean = ctx.g.scale(mean, T::from_f64(-1.0))?;
    let x = ctx.g.add(x, mean)?;
    let tp = ctx.p("video.time_pos")?;
    let tp = ctx.g.slice_rows(tp, 0, t)?;
    let mut x = ctx.g.add(x, tp)?;
    for l in 0..cfg.video_layers {
        x = layers::encoder_layer(ctx, x, &format!("video.l{l}"), cfg.video_heads, false, cfg.video_lora())?;
    }
    let x = ctx.layer_norm(x, "video.ln_f")?;
    let pool = ctx.g.constant(pool_matrix(cfg.m, t))?;
    ctx.g.matmul(pool, x)
}
