//! Visual stack: toy video encoder, periodicity transformer with learnable
//! queries, projector into the language model, toy text encoder, and the
//! periodic-representation / text similarity.

pub mod layers;
mod periodicity;
mod text;
mod video;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use layers::{apply_adapter, apply_adapter_values, check_rank, LoraSpec, LowRankAdapter};
pub use periodicity::{extract_periodicity, project_tokens};
pub use text::{encode_text, encode_text_graph, similarity_g, similarity_values, text_head};
pub use video::{encode_video, patchify, pool_matrix};

use crate::error::{Error, Result};
use crate::lm::{self, LmConfig};
use crate::numerics::{Real, Tensor, Var};
use crate::params::{Ctx, Group, Init, ParamStore};

/// Dimensions and switches of the full pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub frame_size: usize,
    pub patch: usize,
    /// Longest clip the temporal position table covers.
    pub max_frames: usize,
    pub d_v: usize,
    /// Pooled feature rows `m`.
    pub m: usize,
    pub video_layers: usize,
    pub video_heads: usize,
    pub n_queries: usize,
    pub d_z: usize,
    pub periodicity_layers: usize,
    pub periodicity_heads: usize,
    pub feature_pos: bool,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_text_len: usize,
    pub lm: LmConfig,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub video_adapters: bool,
    pub lm_adapters: bool,
    pub count_tokens: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_size: 16,
            patch: 4,
            max_frames: 32,
            d_v: 64,
            m: 32,
            video_layers: 2,
            video_heads: 4,
            n_queries: 8,
            d_z: 64,
            periodicity_layers: 2,
            periodicity_heads: 4,
            feature_pos: true,
            text_layers: 2,
            text_heads: 4,
            max_text_len: 128,
            lm: LmConfig::default(),
            lora_rank: 16,
            lora_scale: 1.0,
            video_adapters: true,
            lm_adapters: true,
            count_tokens: false,
        }
    }
}

impl ModelConfig {
    pub fn patches_per_frame(&self) -> usize {
        (self.frame_size / self.patch).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.frame_size % self.patch != 0 {
            return bad(format!("patch {} does not tile frame {}", self.patch, self.frame_size));
        }
        for (name, d, h) in [
            ("d_v", self.d_v, self.video_heads),
            ("d_z", self.d_z, self.periodicity_heads),
            ("d_z (text)", self.d_z, self.text_heads),
        ] {
            if h == 0 || d % h != 0 {
                return bad(format!("{name}={d} not divisible by {h} heads"));
            }
        }
        if self.m == 0 || self.n_queries == 0 || self.max_frames == 0 {
            return bad("m, n and max_frames must be positive".into());
        }
        self.lm.validate()?;
        if self.n_queries + 2 > self.lm.context_length {
            return bad(format!(
                "{} periodic tokens leave no room in a context of {}",
                self.n_queries, self.lm.context_length
            ));
        }
        let d = self.d_v.min(self.lm.d_l);
        if self.video_adapters || self.lm_adapters {
            check_rank(d, d, self.lora_rank)?;
        }
        Ok(())
    }

    fn lora(&self, enabled: bool, group: Group) -> Option<(LoraSpec, Group)> {
        enabled.then_some((
            LoraSpec {
                rank: self.lora_rank,
                scale: self.lora_scale,
            },
            group,
        ))
    }

    /// Adapter scale for video-encoder projections, when present.
    pub fn video_lora(&self) -> Option<f64> {
        self.video_adapters.then_some(self.lora_scale)
    }

    pub fn lm_lora(&self) -> Option<f64> {
        self.lm_adapters.then_some(self.lora_scale)
    }
}

/// Initial temperature of the contrastive losses.
pub const TAU_INIT: f64 = 0.07;

/// Freshly initialised parameters for every component, seeded.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let mut store = ParamStore::new();
    video::register(&mut store, &mut init, cfg, cfg.lora(cfg.video_adapters, Group::VideoAdapter))?;
    periodicity::register(&mut store, &mut init, cfg)?;
    layers::add_affine(&mut store, &mut init, "proj", cfg.d_z, cfg.lm.d_l, Group::Projector)?;
    text::register(&mut store, &mut init, cfg)?;
    store.insert("tau", Group::Temperature, Tensor::full(&[1, 1], T::from_f64(TAU_INIT)))?;
    lm::register(
        &mut store,
        &mut init,
        &cfg.lm,
        cfg.lora(cfg.lm_adapters, Group::LmAdapter),
        cfg.count_tokens,
    )?;
    Ok(store)
}

/// Periodic representation `Z` (`n x d_z`) of a `t x (h*w)` clip.
pub fn represent<T: Real>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, clip: &Tensor<T>) -> Result<Var> {
    let f = encode_video(ctx, cfg, clip)?;
    extract_periodicity(ctx, cfg, f)
}

/// Periodic tokens (`n x d_l`) of a clip, ready to prefix the language model.
pub fn periodic_tokens<T: Real>(ctx: &mut Ctx<'_, T>, cfg: &ModelConfig, clip: &Tensor<T>) -> Result<Var> {
    let z = represent(ctx, cfg, clip)?;
    project_tokens(ctx, z)
}

/// Frame-major intensities as a `t x (size*size)` tensor.
pub fn clip_tensor<T: Real>(frames: &[f32], frame_size: usize) -> Result<Tensor<T>> {
    let hw = frame_size * frame_size;
    if hw == 0 || frames.len() % hw != 0 {
        return Err(Error::Input(format!("{} intensities are not whole {frame_size}x{frame_size} frames", frames.len())));
    }
    Tensor::new(vec![frames.len() / hw, hw], frames.iter().map(|&x| T::from_f64(x as f64)).collect())
}

#[cfg(test)]
mod tests;
