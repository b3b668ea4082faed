//! Seeded corpora of synthetic videos.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::render::generate_video;
use super::spec::{MotionFamily, MotionSpec, Sample, DEFAULT_CLIP_LEN};
use crate::error::{Error, Result};
use crate::exec;

/// Which motion families a corpus draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Profile {
    /// Oscillating square and pulsing blob.
    FamilyA,
    /// Bouncing ball and rotating bar.
    FamilyB,
    All,
}

impl Profile {
    pub fn families(self) -> &'static [MotionFamily] {
        use MotionFamily::*;
        match self {
            Profile::FamilyA => &[OscillatingSquare, PulsingBlob],
            Profile::FamilyB => &[BouncingBall, RotatingBar],
            Profile::All => &[OscillatingSquare, BouncingBall, PulsingBlob, RotatingBar],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Profile::FamilyA => "family-a",
            Profile::FamilyB => "family-b",
            Profile::All => "all",
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "family-a" | "a" => Ok(Profile::FamilyA),
            "family-b" | "b" => Ok(Profile::FamilyB),
            "all" => Ok(Profile::All),
            _ => Err(Error::Config(format!("unknown generator profile `{s}`"))),
        }
    }
}

/// Sampling ranges for random motion specs.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusConfig {
    pub max_frames: u32,
    pub min_cycle_len: u32,
    pub max_cycle_len: u32,
    pub min_cycles: u32,
    /// Share of drifting-noise videos.
    pub aperiodic_fraction: f64,
    pub amplitude: (f32, f32),
    pub max_noise: f32,
    pub max_distractors: u32,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            max_frames: 64,
            min_cycle_len: 6,
            max_cycle_len: 16,
            min_cycles: 2,
            aperiodic_fraction: 0.1,
            amplitude: (3.0, 6.0),
            max_noise: 0.2,
            max_distractors: 3,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_cycle_len < 2 || self.min_cycle_len > self.max_cycle_len {
            return bad(format!(
                "cycle length range [{}, {}] is invalid",
                self.min_cycle_len, self.max_cycle_len
            ));
        }
        if self.max_cycle_len as usize > DEFAULT_CLIP_LEN {
            return bad(format!("max cycle length {} exceeds the clip length", self.max_cycle_len));
        }
        if self.min_cycles.max(1) * self.max_cycle_len > self.max_frames {
            return bad(format!(
                "{} frames cannot hold {} cycles of length {}",
                self.max_frames, self.min_cycles, self.max_cycle_len
            ));
        }
        if !(0.0..=1.0).contains(&self.aperiodic_fraction) {
            return bad(format!("aperiodic fraction {}", self.aperiodic_fraction));
        }
        if !(0.0..=1.0).contains(&self.max_noise) {
            return bad(format!("noise level {}", self.max_noise));
        }
        if !(self.amplitude.0 >= 0.0 && self.amplitude.0 <= self.amplitude.1) {
            return bad(format!("amplitude range {:?}", self.amplitude));
        }
        Ok(())
    }

    /// Draws a valid spec from `families`.
    pub fn sample_spec(&self, families: &[MotionFamily], rng: &mut impl Rng) -> MotionSpec {
        let amplitude = if self.amplitude.0 < self.amplitude.1 {
            rng.random_range(self.amplitude.0..=self.amplitude.1)
        } else {
            self.amplitude.0
        };
        let noise_level = rng.random_range(0.0..=self.max_noise);
        let distractor_count = rng.random_range(0..=self.max_distractors);
        let cycle_length = rng.random_range(self.min_cycle_len..=self.max_cycle_len);
        if rng.random_bool(self.aperiodic_fraction) {
            let frames = rng.random_range(cycle_length..=self.max_frames);
            return MotionSpec {
                family: MotionFamily::DriftingNoise,
                cycle_count: 0,
                cycle_length,
                phase_offset: frames - cycle_length + 1,
                tail: cycle_length - 1,
                amplitude,
                noise_level,
                distractor_count,
            };
        }
        let family = families[rng.random_range(0..families.len())];
        let max_cycles = self.max_frames / cycle_length;
        let cycle_count = rng.random_range(self.min_cycles.max(1)..=max_cycles);
        let spare = self.max_frames - cycle_count * cycle_length;
        let tail = rng.random_range(0..=spare.min(cycle_length - 1));
        let phase_offset = rng.random_range(0..=(spare - tail).min(cycle_length - 1));
        MotionSpec {
            family,
            cycle_count,
            cycle_length,
            phase_offset,
            tail,
            amplitude,
            noise_level,
            distractor_count,
        }
    }
}

/// SplitMix64 finaliser, used to derive independent per-video seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` videos from `profile`, a pure function of the arguments.
pub fn generate_corpus(profile: Profile, n: usize, seed: u64, cfg: &CorpusConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    exec::try_map_range(n, |i| {
        let video_seed = splitmix64(seed ^ splitmix64(i as u64));
        let mut rng = ChaCha8Rng::seed_from_u64(video_seed);
        let spec = cfg.sample_spec(profile.families(), &mut rng);
        let (video, annotation) = generate_video(&spec, video_seed)?;
        Ok(Sample { video, annotation })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_are_disjoint() {
        let a = generate_corpus(Profile::FamilyA, 200, 1, &CorpusConfig::default()).unwrap();
        let b = generate_corpus(Profile::FamilyB, 200, 1, &CorpusConfig::default()).unwrap();
        let fam = |d: &[Sample]| {
            d.iter()
                .map(|s| s.video.spec.family)
                .filter(|f| f.is_periodic())
                .collect::<std::collections::BTreeSet<_>>()
        };
        assert!(fam(&a).is_disjoint(&fam(&b)));
        assert!(a.iter().any(|s| !s.video.spec.family.is_periodic()));
    }

    #[test]
    fn specs_respect_bounds() {
        let cfg = CorpusConfig::default();
        for s in generate_corpus(Profile::All, 300, 9, &cfg).unwrap() {
            assert!(s.video.t <= cfg.max_frames as usize);
            assert!(s.video.spec.validate(DEFAULT_CLIP_LEN).is_ok());
            assert!(s.annotation.is_consistent());
        }
    }

    #[test]
    fn deterministic_in_seed() {
        let cfg = CorpusConfig::default();
        assert_eq!(
            generate_corpus(Profile::FamilyA, 5, 3, &cfg).unwrap(),
            generate_corpus(Profile::FamilyA, 5, 3, &cfg).unwrap()
        );
    }

    #[test]
    fn profile_names_parse() {
        for p in [Profile::FamilyA, Profile::FamilyB, Profile::All] {
            assert_eq!(p.name().parse::<Profile>().unwrap(), p);
        }
        assert!("c".parse::<Profile>().is_err());
    }
}
