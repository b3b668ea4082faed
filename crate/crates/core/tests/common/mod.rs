#![allow(dead_code)]

use periocount::config::RunConfig;
use periocount::synthdata::{generate_corpus, Sample};

/// A model and corpus small enough to train in well under a second.
pub const TINY: &str = "
precision = f64
d_v = 8
m = 4
video_layers = 1
video_heads = 2
n_queries = 3
d_z = 8
periodicity_layers = 1
periodicity_heads = 2
text_layers = 1
text_heads = 2
d_l = 8
lm_layers = 1
lm_heads = 2
lm_ffn = 16
lora_rank = 2
video_max_frames = 24
min_cycle_len = 3
max_cycle_len = 8
stage1_epochs = 1
stage1_batch = 4
stage1_clip_frames = 8
stage2_epochs = 1
stage2_batch = 4
stage2_clip_frames = 8
stage3_epochs = 1
stage3_batch = 3
stage3_clip_frames = 16
lm_pretrain_sequences = 6
lm_pretrain_epochs = 1
lm_pretrain_batch = 3
train_videos = 8
test_videos = 4
";

pub fn tiny() -> RunConfig {
    RunConfig::from_text(TINY).unwrap()
}

pub fn tiny_data(cfg: &RunConfig) -> Vec<Sample> {
    generate_corpus(cfg.train_profile, cfg.train_videos, cfg.data_seed, &cfg.corpus).unwrap()
}
