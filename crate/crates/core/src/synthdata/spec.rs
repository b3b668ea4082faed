use crate::error::{Error, Result};

/// Default number of frames per clip.
pub const DEFAULT_CLIP_LEN: usize = 32;
/// Frame height and width of generated videos.
pub const FRAME_SIZE: usize = 16;
/// Largest count representable in the clip answer format.
pub const MAX_COUNT: u32 = 9999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MotionFamily {
    OscillatingSquare,
    BouncingBall,
    PulsingBlob,
    RotatingBar,
    /// Aperiodic drift; never carries cycles.
    DriftingNoise,
}

impl MotionFamily {
    pub const ALL: [MotionFamily; 5] = [
        MotionFamily::OscillatingSquare,
        MotionFamily::BouncingBall,
        MotionFamily::PulsingBlob,
        MotionFamily::RotatingBar,
        MotionFamily::DriftingNoise,
    ];

    pub fn code(self) -> u8 {
        match self {
            MotionFamily::OscillatingSquare => 0,
            MotionFamily::BouncingBall => 1,
            MotionFamily::PulsingBlob => 2,
            MotionFamily::RotatingBar => 3,
            MotionFamily::DriftingNoise => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        MotionFamily::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionFamily::OscillatingSquare => "oscillating-square",
            MotionFamily::BouncingBall => "bouncing-ball",
            MotionFamily::PulsingBlob => "pulsing-blob",
            MotionFamily::RotatingBar => "rotating-bar",
            MotionFamily::DriftingNoise => "drifting-noise",
        }
    }

    pub fn is_periodic(self) -> bool {
        self != MotionFamily::DriftingNoise
    }
}

/// Parameters of one synthetic video.
///
/// The video has `phase_offset` still frames, then `cycle_count` back-to-back
/// cycles of `cycle_length` frames, then `tail` still frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionSpec {
    pub family: MotionFamily,
    pub cycle_count: u32,
    pub cycle_length: u32,
    pub phase_offset: u32,
    pub tail: u32,
    /// Motion extent in pixels.
    pub amplitude: f32,
    /// Per-pixel noise strength in `[0, 1]`.
    pub noise_level: f32,
    pub distractor_count: u32,
}

impl MotionSpec {
    pub fn total_frames(&self) -> usize {
        self.phase_offset as usize + self.cycle_count as usize * self.cycle_length as usize + self.tail as usize
    }

    pub fn validate(&self, clip_len: usize) -> Result<()> {
        if self.cycle_length < 2 {
            return Err(Error::Spec(format!("cycle length {} < 2", self.cycle_length)));
        }
        if self.cycle_length as usize > clip_len {
            return Err(Error::Spec(format!(
                "cycle length {} exceeds clip length {clip_len}",
                self.cycle_length
            )));
        }
        if !self.family.is_periodic() && self.cycle_count != 0 {
            return Err(Error::Spec("drifting-noise videos carry no cycles".into()));
        }
        if self.cycle_count > MAX_COUNT {
            return Err(Error::Spec(format!("cycle count {} above {MAX_COUNT}", self.cycle_count)));
        }
        if self.tail >= self.cycle_length {
            return Err(Error::Spec(format!(
                "tail {} must be shorter than the cycle length {}",
                self.tail, self.cycle_length
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Spec(format!("noise level {} outside [0, 1]", self.noise_level)));
        }
        if !self.amplitude.is_finite() || self.amplitude < 0.0 {
            return Err(Error::Spec(format!("amplitude {}", self.amplitude)));
        }
        if self.total_frames() == 0 {
            return Err(Error::Spec("video has no frames".into()));
        }
        Ok(())
    }
}

/// Ground-truth cycles: half-open, disjoint, sorted frame intervals.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CycleAnnotation {
    pub count: u32,
    pub cycle_intervals: Vec<(u32, u32)>,
}

impl CycleAnnotation {
    pub fn of_spec(spec: &MotionSpec) -> Self {
        let intervals: Vec<(u32, u32)> = (0..spec.cycle_count)
            .map(|i| {
                let s = spec.phase_offset + i * spec.cycle_length;
                (s, s + spec.cycle_length)
            })
            .collect();
        CycleAnnotation {
            count: intervals.len() as u32,
            cycle_intervals: intervals,
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.count as usize == self.cycle_intervals.len()
            && self.cycle_intervals.iter().all(|&(a, b)| a < b)
            && self.cycle_intervals.windows(2).all(|w| w[0].1 <= w[1].0)
    }
}

/// Clip-level label `[abcd,e,f]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct ClipLabel {
    pub clip_count: u32,
    pub start_incomplete: bool,
    pub end_incomplete: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    /// `t * h * w` intensities in `[0, 1]`, frame-major.
    pub frames: Vec<f32>,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub spec: MotionSpec,
    pub seed: u64,
}

impl SyntheticVideo {
    pub fn frame(&self, i: usize) -> &[f32] {
        let n = self.h * self.w;
        &self.frames[i * n..(i + 1) * n]
    }
}

/// A video together with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video: SyntheticVideo,
    pub annotation: CycleAnnotation,
}
