//! Flat `key = value` run configuration with desk and paper-fidelity presets.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm::{LmConfig, PretrainConfig};
use crate::model::ModelConfig;
use crate::numerics::Precision;
pub use crate::protocol::AnswerTokens;
use crate::synthdata::{CorpusConfig, Profile};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

/// Where low-rank adapters are inserted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Adapters {
    Both,
    Video,
    Lm,
    None,
}

impl Adapters {
    pub fn video(self) -> bool {
        matches!(self, Adapters::Both | Adapters::Video)
    }

    pub fn lm(self) -> bool {
        matches!(self, Adapters::Both | Adapters::Lm)
    }
}

/// Per-stage schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub clip_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub precision: Precision,
    pub model: ModelConfig,
    pub stages: [StageSchedule; 3],
    pub clip_norm: f64,
    pub pretrain: PretrainConfig,
    pub corpus: CorpusConfig,
    pub train_profile: Profile,
    pub test_profile: Profile,
    pub train_videos: usize,
    pub test_videos: usize,
    pub model_seed: u64,
    pub data_seed: u64,
    pub test_seed: u64,
    pub train_seed: u64,
    pub sample_interval: usize,
    pub max_answer_len: usize,
    pub description: bool,
    pub answer_tokens: AnswerTokens,
    pub adapters: Adapters,
    pub skip_stage1: bool,
    pub skip_stage2: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "on" | "1" | "yes" => Ok(true),
        "false" | "off" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean {value:?} for {key}"))),
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut model = ModelConfig::default();
        let mut epochs = [5, 10, 10];
        if preset == Preset::Paper {
            model.n_queries = 64;
            model.periodicity_layers = 12;
            epochs = [10, 50, 50];
        }
        let stage = |i: usize, batch: usize, lr: f64, clip_frames: usize| StageSchedule {
            epochs: epochs[i],
            batch,
            lr,
            clip_frames,
        };
        RunConfig {
            preset,
            precision: Precision::Standard,
            model,
            stages: [stage(0, 32, 1e-3, 16), stage(1, 32, 1e-3, 16), stage(2, 8, 3e-4, 32)],
            clip_norm: 1.0,
            pretrain: PretrainConfig::default(),
            corpus: CorpusConfig::default(),
            train_profile: Profile::FamilyA,
            test_profile: Profile::FamilyA,
            train_videos: 2000,
            test_videos: 200,
            model_seed: 17,
            data_seed: 1,
            test_seed: 2,
            train_seed: 3,
            sample_interval: 1,
            max_answer_len: 16,
            description: true,
            answer_tokens: AnswerTokens::Decimal,
            adapters: Adapters::Both,
            skip_stage1: false,
            skip_stage2: false,
        }
    }

    /// Model configuration with the ablation switches applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.video_adapters = self.adapters.video();
        m.lm_adapters = self.adapters.lm();
        m.count_tokens = self.answer_tokens == AnswerTokens::Learned;
        m
    }

    pub fn stage(&self, stage: usize) -> &StageSchedule {
        &self.stages[stage - 1]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        let lm: &mut LmConfig = &mut m.lm;
        macro_rules! num {
            ($field:expr) => {
                $field = parse(key, v)?
            };
        }
        match key {
            "profile" => {
                let preset = match v {
                    "desk" => Preset::Desk,
                    "paper" => Preset::Paper,
                    _ => return Err(Error::Config(format!("unknown profile {v:?}, expected desk or paper"))),
                };
                *self = RunConfig::preset(preset);
            }
            "precision" => {
                self.precision =
                    Precision::parse(v).ok_or_else(|| Error::Config(format!("unknown precision {v:?}")))?
            }
            "frame_size" => num!(m.frame_size),
            "patch" => num!(m.patch),
            "max_frames" => num!(m.max_frames),
            "d_v" => num!(m.d_v),
            "m" => num!(m.m),
            "video_layers" => num!(m.video_layers),
            "video_heads" => num!(m.video_heads),
            "n_queries" => num!(m.n_queries),
            "d_z" => num!(m.d_z),
            "periodicity_layers" => num!(m.periodicity_layers),
            "periodicity_heads" => num!(m.periodicity_heads),
            "feature_pos" => m.feature_pos = parse_bool(key, v)?,
            "text_layers" => num!(m.text_layers),
            "text_heads" => num!(m.text_heads),
            "max_text_len" => num!(m.max_text_len),
            "d_l" => num!(lm.d_l),
            "lm_layers" => num!(lm.layers),
            "lm_heads" => num!(lm.heads),
            "context_length" => num!(lm.context_length),
            "lm_ffn" => num!(lm.ffn_hidden),
            "lora_rank" => num!(m.lora_rank),
            "lora_scale" => num!(m.lora_scale),
            "stage1_epochs" => num!(self.stages[0].epochs),
            "stage2_epochs" => num!(self.stages[1].epochs),
            "stage3_epochs" => num!(self.stages[2].epochs),
            "stage1_batch" => num!(self.stages[0].batch),
            "stage2_batch" => num!(self.stages[1].batch),
            "stage3_batch" => num!(self.stages[2].batch),
            "stage1_lr" => num!(self.stages[0].lr),
            "stage2_lr" => num!(self.stages[1].lr),
            "stage3_lr" => num!(self.stages[2].lr),
            "stage1_clip_frames" => num!(self.stages[0].clip_frames),
            "stage2_clip_frames" => num!(self.stages[1].clip_frames),
            "stage3_clip_frames" => num!(self.stages[2].clip_frames),
            "clip_norm" => num!(self.clip_norm),
            "lm_pretrain_sequences" => num!(self.pretrain.sequences),
            "lm_pretrain_epochs" => num!(self.pretrain.epochs),
            "lm_pretrain_batch" => num!(self.pretrain.batch),
            "lm_pretrain_lr" => num!(self.pretrain.lr),
            "lm_pretrain_seed" => num!(self.pretrain.seed),
            "video_max_frames" => num!(self.corpus.max_frames),
            "min_cycle_len" => num!(self.corpus.min_cycle_len),
            "max_cycle_len" => num!(self.corpus.max_cycle_len),
            "min_cycles" => num!(self.corpus.min_cycles),
            "aperiodic_fraction" => num!(self.corpus.aperiodic_fraction),
            "min_amplitude" => num!(self.corpus.amplitude.0),
            "max_amplitude" => num!(self.corpus.amplitude.1),
            "max_noise" => num!(self.corpus.max_noise),
            "max_distractors" => num!(self.corpus.max_distractors),
            "train_profile" => self.train_profile = v.parse()?,
            "test_profile" => self.test_profile = v.parse()?,
            "train_videos" => num!(self.train_videos),
            "test_videos" => num!(self.test_videos),
            "model_seed" => num!(self.model_seed),
            "data_seed" => num!(self.data_seed),
            "test_seed" => num!(self.test_seed),
            "train_seed" => num!(self.train_seed),
            "sample_interval" => num!(self.sample_interval),
            "max_answer_len" => num!(self.max_answer_len),
            "description" => self.description = parse_bool(key, v)?,
            "answer_tokens" => {
                self.answer_tokens = match v {
                    "decimal" => AnswerTokens::Decimal,
                    "learned" => AnswerTokens::Learned,
                    _ => return Err(Error::Config(format!("answer_tokens must be decimal or learned, got {v:?}"))),
                }
            }
            "adapters" => {
                self.adapters = match v {
                    "both" => Adapters::Both,
                    "video" => Adapters::Video,
                    "lm" => Adapters::Lm,
                    "none" => Adapters::None,
                    _ => return Err(Error::Config(format!("adapters must be both, video, lm or none, got {v:?}"))),
                }
            }
            "skip_stage1" => self.skip_stage1 = parse_bool(key, v)?,
            "skip_stage2" => self.skip_stage2 = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a named ablation.
    pub fn ablate(&mut self, name: &str) -> Result<()> {
        match name {
            "no-description" => self.description = false,
            "learned-count-token" => self.answer_tokens = AnswerTokens::Learned,
            "no-stage1" | "skip-stage1" => self.skip_stage1 = true,
            "no-stage2" | "skip-stage2" => self.skip_stage2 = true,
            "video-adapters-only" => self.adapters = Adapters::Video,
            "lm-adapters-only" => self.adapters = Adapters::Lm,
            _ => return Err(Error::Config(format!("unknown ablation {name:?}"))),
        }
        Ok(())
    }

    /// Names of the active ablations, in a fixed order.
    pub fn ablations(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.skip_stage1 {
            out.push("no-stage1");
        }
        if self.skip_stage2 {
            out.push("no-stage2");
        }
        if !self.description {
            out.push("no-description");
        }
        if self.answer_tokens == AnswerTokens::Learned {
            out.push("learned-count-token");
        }
        match self.adapters {
            Adapters::Video => out.push("video-adapters-only"),
            Adapters::Lm => out.push("lm-adapters-only"),
            Adapters::None => out.push("no-adapters"),
            Adapters::Both => {}
        }
        out
    }

    /// Applies `(key, value)` pairs; a `profile` entry is applied first so
    /// the others override its preset.
    pub fn apply<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let pairs: Vec<_> = pairs.into_iter().collect();
        for (k, v) in pairs.iter().filter(|(k, _)| *k == "profile") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "profile") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let pairs = Self::parse_text(text)?;
        let mut cfg = RunConfig::default();
        cfg.apply(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.corpus.validate()?;
        for (i, s) in self.stages.iter().enumerate() {
            if s.batch == 0 {
                return Err(Error::Config(format!("stage {} batch size must be positive", i + 1)));
            }
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(Error::Config(format!("stage {} learning rate {}", i + 1, s.lr)));
            }
            if s.clip_frames < 2 || s.clip_frames > self.model.max_frames {
                return Err(Error::Config(format!(
                    "stage {} clip frames {} outside 2..={}",
                    i + 1,
                    s.clip_frames,
                    self.model.max_frames
                )));
            }
        }
        if self.stages[0].batch < 2 {
            return Err(Error::Config("stage 1 needs a batch of at least 2".into()));
        }
        if self.sample_interval == 0 {
            return Err(Error::Config("sample_interval must be at least 1".into()));
        }
        if self.corpus.max_cycle_len as usize > self.stages[2].clip_frames {
            return Err(Error::Config(format!(
                "cycles of {} frames do not fit {}-frame clips",
                self.corpus.max_cycle_len, self.stages[2].clip_frames
            )));
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let s = &self.stages;
        let b = |x: bool| x.to_string();
        vec![
            ("profile", self.preset.name().into()),
            ("precision", self.precision.name().into()),
            ("frame_size", m.frame_size.to_string()),
            ("patch", m.patch.to_string()),
            ("max_frames", m.max_frames.to_string()),
            ("d_v", m.d_v.to_string()),
            ("m", m.m.to_string()),
            ("video_layers", m.video_layers.to_string()),
            ("video_heads", m.video_heads.to_string()),
            ("n_queries", m.n_queries.to_string()),
            ("d_z", m.d_z.to_string()),
            ("periodicity_layers", m.periodicity_layers.to_string()),
            ("periodicity_heads", m.periodicity_heads.to_string()),
            ("feature_pos", b(m.feature_pos)),
            ("text_layers", m.text_layers.to_string()),
            ("text_heads", m.text_heads.to_string()),
            ("max_text_len", m.max_text_len.to_string()),
            ("d_l", m.lm.d_l.to_string()),
            ("lm_layers", m.lm.layers.to_string()),
            ("lm_heads", m.lm.heads.to_string()),
            ("context_length", m.lm.context_length.to_string()),
            ("lm_ffn", m.lm.ffn_hidden.to_string()),
            ("lora_rank", m.lora_rank.to_string()),
            ("lora_scale", m.lora_scale.to_string()),
            ("stage1_epochs", s[0].epochs.to_string()),
            ("stage2_epochs", s[1].epochs.to_string()),
            ("stage3_epochs", s[2].epochs.to_string()),
            ("stage1_batch", s[0].batch.to_string()),
            ("stage2_batch", s[1].batch.to_string()),
            ("stage3_batch", s[2].batch.to_string()),
            ("stage1_lr", s[0].lr.to_string()),
            ("stage2_lr", s[1].lr.to_string()),
            ("stage3_lr", s[2].lr.to_string()),
            ("stage1_clip_frames", s[0].clip_frames.to_string()),
            ("stage2_clip_frames", s[1].clip_frames.to_string()),
            ("stage3_clip_frames", s[2].clip_frames.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("lm_pretrain_sequences", self.pretrain.sequences.to_string()),
            ("lm_pretrain_epochs", self.pretrain.epochs.to_string()),
            ("lm_pretrain_batch", self.pretrain.batch.to_string()),
            ("lm_pretrain_lr", self.pretrain.lr.to_string()),
            ("lm_pretrain_seed", self.pretrain.seed.to_string()),
            ("video_max_frames", self.corpus.max_frames.to_string()),
            ("min_cycle_len", self.corpus.min_cycle_len.to_string()),
            ("max_cycle_len", self.corpus.max_cycle_len.to_string()),
            ("min_cycles", self.corpus.min_cycles.to_string()),
            ("aperiodic_fraction", self.corpus.aperiodic_fraction.to_string()),
            ("min_amplitude", self.corpus.amplitude.0.to_string()),
            ("max_amplitude", self.corpus.amplitude.1.to_string()),
            ("max_noise", self.corpus.max_noise.to_string()),
            ("max_distractors", self.corpus.max_distractors.to_string()),
            ("train_profile", self.train_profile.name().into()),
            ("test_profile", self.test_profile.name().into()),
            ("train_videos", self.train_videos.to_string()),
            ("test_videos", self.test_videos.to_string()),
            ("model_seed", self.model_seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("test_seed", self.test_seed.to_string()),
            ("train_seed", self.train_seed.to_string()),
            ("sample_interval", self.sample_interval.to_string()),
            ("max_answer_len", self.max_answer_len.to_string()),
            ("description", b(self.description)),
            (
                "answer_tokens",
                match self.answer_tokens {
                    AnswerTokens::Decimal => "decimal",
                    AnswerTokens::Learned => "learned",
                }
                .into(),
            ),
            (
                "adapters",
                match self.adapters {
                    Adapters::Both => "both",
                    Adapters::Video => "video",
                    Adapters::Lm => "lm",
                    Adapters::None => "none",
                }
                .into(),
            ),
            ("skip_stage1", b(self.skip_stage1)),
            ("skip_stage2", b(self.skip_stage2)),
        ]
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.to_pairs() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 over the keys that determine parameter names and shapes.
    pub fn digest(&self) -> [u8; 32] {
        const ARCH: [&str; 23] = [
            "precision",
            "frame_size",
            "patch",
            "max_frames",
            "d_v",
            "m",
            "video_layers",
            "video_heads",
            "n_queries",
            "d_z",
            "periodicity_layers",
            "periodicity_heads",
            "feature_pos",
            "text_layers",
            "text_heads",
            "max_text_len",
            "d_l",
            "lm_layers",
            "lm_heads",
            "context_length",
            "lm_ffn",
            "lora_rank",
            "answer_tokens",
        ];
        let mut h = Sha256::new();
        for (k, v) in self.to_pairs() {
            if ARCH.contains(&k) || k == "adapters" {
                h.update(k.as_bytes());
                h.update(b"=");
                h.update(v.as_bytes());
                h.update(b"\n");
            }
        }
        h.finalize().into()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("d_z", "32").unwrap();
        cfg.set("description", "off").unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_text("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("d_z"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_text("d_z = x"), Err(Error::Config(_))));
    }

    #[test]
    fn paper_profile_preset() {
        let cfg = RunConfig::from_text("d_l = 64\nprofile = paper\n").unwrap();
        assert_eq!(cfg.model.n_queries, 64);
        assert_eq!(cfg.model.periodicity_layers, 12);
        assert_eq!(cfg.stages.map(|s| s.epochs), [10, 50, 50]);
        assert_eq!(cfg.model.lm.d_l, 64);
        let desk = RunConfig::default();
        assert_eq!(desk.stages.map(|s| s.epochs), [5, 10, 10]);
        assert_eq!((desk.model.n_queries, desk.model.periodicity_layers), (8, 2));
    }

    #[test]
    fn digest_tracks_architecture_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.set("stage3_epochs", "1").unwrap();
        assert_eq!(a.digest(), b.digest());
        b.set("d_z", "32").unwrap();
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn ablations_named() {
        let mut cfg = RunConfig::default();
        cfg.ablate("no-description").unwrap();
        cfg.ablate("learned-count-token").unwrap();
        assert_eq!(cfg.ablations(), vec!["no-description", "learned-count-token"]);
        assert!(cfg.model_config().count_tokens);
        assert!(cfg.ablate("bogus").is_err());
    }
}
