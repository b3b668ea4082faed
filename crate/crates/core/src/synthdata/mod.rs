//! Synthetic periodic videos, exact cycle annotations and clip labels.

mod clips;
mod corpus;
mod io;
mod render;
mod spec;

pub use clips::{clips_of, label_window, make_stage2_pairs, split_into_clips, Clip};
pub use corpus::{generate_corpus, splitmix64, CorpusConfig, Profile};
pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub(crate) use io::Reader;
pub use render::{caption_of, generate_video};
pub use spec::{
    ClipLabel, CycleAnnotation, MotionFamily, MotionSpec, Sample, SyntheticVideo, DEFAULT_CLIP_LEN, FRAME_SIZE,
    MAX_COUNT,
};
