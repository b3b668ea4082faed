//! Clip partitioning and clip-level labels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::{ClipLabel, CycleAnnotation, Sample, SyntheticVideo};
use crate::error::{Error, Result};

/// One fixed-length clip of a video.
#[derive(Clone, Debug, PartialEq)]
pub struct Clip {
    /// `clip_len * h * w` intensities.
    pub frames: Vec<f32>,
    pub label: ClipLabel,
    /// Index of the first frame in the subsampled timeline.
    pub start: usize,
}

/// Maps a half-open interval of original frames to the subsampled timeline
/// (frames `0, k, 2k, ...`).
fn map_interval((a, b): (u32, u32), k: usize) -> (usize, usize) {
    let (a, b) = (a as usize, b as usize);
    (a.div_ceil(k), b.div_ceil(k))
}

/// Subsamples every `sample_interval`-th frame, then cuts consecutive
/// non-overlapping windows of `clip_len` frames. The last window is padded by
/// repeating the final frame.
pub fn split_into_clips(
    video: &SyntheticVideo,
    annotation: &CycleAnnotation,
    clip_len: usize,
    sample_interval: usize,
) -> Result<Vec<Clip>> {
    if video.t == 0 || video.frames.is_empty() {
        return Err(Error::Input("empty video".into()));
    }
    if clip_len < 2 {
        return Err(Error::Input(format!("clip length {clip_len} < 2")));
    }
    if sample_interval == 0 {
        return Err(Error::Input("sample interval must be at least 1".into()));
    }
    if let Some(&(a, b)) = annotation
        .cycle_intervals
        .iter()
        .find(|&&(a, b)| ((b - a) as usize) < sample_interval)
    {
        return Err(Error::Input(format!(
            "cycle [{a}, {b}) is shorter than the sample interval {sample_interval}"
        )));
    }
    let kept: Vec<usize> = (0..video.t).step_by(sample_interval).collect();
    let mapped: Vec<(usize, usize)> = annotation
        .cycle_intervals
        .iter()
        .map(|&iv| map_interval(iv, sample_interval))
        .collect();
    let n_clips = kept.len().div_ceil(clip_len);
    let frame_len = video.h * video.w;
    let mut clips = Vec::with_capacity(n_clips);
    for c in 0..n_clips {
        let lo = c * clip_len;
        let hi = lo + clip_len;
        let mut frames = Vec::with_capacity(clip_len * frame_len);
        for j in lo..hi {
            let src = kept[j.min(kept.len() - 1)];
            frames.extend_from_slice(video.frame(src));
        }
        clips.push(Clip {
            frames,
            label: label_window(&mapped, lo, hi),
            start: lo,
        });
    }
    Ok(clips)
}

/// Label of window `[lo, hi)` given cycle intervals on the same timeline.
pub fn label_window(intervals: &[(usize, usize)], lo: usize, hi: usize) -> ClipLabel {
    ClipLabel {
        clip_count: intervals.iter().filter(|&&(a, b)| a >= lo && b <= hi).count() as u32,
        start_incomplete: intervals.iter().any(|&(a, b)| a < lo && lo < b),
        end_incomplete: intervals.iter().any(|&(a, b)| a < hi && hi < b),
    }
}

/// Splits every sample and returns the clips, video by video.
pub fn clips_of(samples: &[Sample], clip_len: usize, sample_interval: usize) -> Result<Vec<Vec<Clip>>> {
    samples
        .iter()
        .map(|s| split_into_clips(&s.video, &s.annotation, clip_len, sample_interval))
        .collect()
}

/// Clips labelled for periodicity alignment: `true` for clips containing
/// repetitive motion, `false` otherwise. Classes are balanced exactly by
/// subsampling the larger one with a seeded shuffle.
pub fn make_stage2_pairs(samples: &[Sample], clip_len: usize, seed: u64) -> Result<Vec<(Vec<f32>, bool)>> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in samples {
        for clip in split_into_clips(&s.video, &s.annotation, clip_len, 1)? {
            let l = clip.label;
            let periodic = l.clip_count >= 1 || l.start_incomplete || l.end_incomplete;
            if periodic && s.video.spec.family.is_periodic() {
                pos.push(clip.frames);
            } else {
                neg.push(clip.frames);
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Composition(format!(
            "need both classes, got {} positive and {} negative clips",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let n = pos.len().min(neg.len());
    pos.truncate(n);
    neg.truncate(n);
    let mut pairs: Vec<(Vec<f32>, bool)> = pos
        .into_iter()
        .map(|f| (f, true))
        .chain(neg.into_iter().map(|f| (f, false)))
        .collect();
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::spec::{MotionFamily, MotionSpec};

    fn video(t: usize) -> SyntheticVideo {
        SyntheticVideo {
            frames: (0..t * 4).map(|i| (i / 4) as f32).collect(),
            t,
            h: 2,
            w: 2,
            spec: MotionSpec {
                family: MotionFamily::PulsingBlob,
                cycle_count: 0,
                cycle_length: 8,
                phase_offset: 0,
                tail: 0,
                amplitude: 1.0,
                noise_level: 0.0,
                distractor_count: 0,
            },
            seed: 0,
        }
    }

    fn ann(iv: &[(u32, u32)]) -> CycleAnnotation {
        CycleAnnotation {
            count: iv.len() as u32,
            cycle_intervals: iv.to_vec(),
        }
    }

    #[test]
    fn single_clip() {
        let clips = split_into_clips(&video(32), &ann(&[(2, 10), (10, 18), (18, 26)]), 32, 1).unwrap();
        assert_eq!(clips.len(), 1);
        assert_eq!(
            clips[0].label,
            ClipLabel {
                clip_count: 3,
                start_incomplete: false,
                end_incomplete: false
            }
        );
    }

    #[test]
    fn straddling_cycle_sets_both_flags() {
        // Two complete cycles in clip 1, one straddling the boundary at 32,
        // one complete cycle in clip 2.
        let a = ann(&[(4, 14), (14, 24), (26, 38), (40, 50)]);
        let clips = split_into_clips(&video(64), &a, 32, 1).unwrap();
        let labels: Vec<_> = clips.iter().map(|c| c.label).collect();
        assert_eq!(
            labels,
            vec![
                ClipLabel { clip_count: 2, start_incomplete: false, end_incomplete: true },
                ClipLabel { clip_count: 1, start_incomplete: true, end_incomplete: false },
            ]
        );
    }

    #[test]
    fn cycle_ending_on_boundary_is_complete() {
        let clips = split_into_clips(&video(64), &ann(&[(24, 32), (32, 40)]), 32, 1).unwrap();
        assert_eq!(clips[0].label.clip_count, 1);
        assert!(!clips[0].label.end_incomplete && !clips[1].label.start_incomplete);
    }

    #[test]
    fn last_clip_repeats_final_frame() {
        let clips = split_into_clips(&video(40), &ann(&[]), 32, 1).unwrap();
        assert_eq!(clips.len(), 2);
        let last = &clips[1].frames;
        assert_eq!(last.len(), 32 * 4);
        assert!(last[7 * 4..].iter().all(|&v| v == 39.0));
    }

    #[test]
    fn subsampling_maps_intervals() {
        // Interval [3, 9) keeps original frames 4, 6, 8 -> subsampled 2..5.
        let clips = split_into_clips(&video(20), &ann(&[(3, 9)]), 4, 2).unwrap();
        assert_eq!(clips.len(), 3);
        assert_eq!(clips[0].label.end_incomplete, true);
        assert_eq!(clips[1].label.start_incomplete, true);
        assert_eq!(clips[0].frames[4], 2.0);
    }

    #[test]
    fn errors() {
        let mut empty = video(0);
        empty.frames.clear();
        assert!(matches!(split_into_clips(&empty, &ann(&[]), 32, 1), Err(Error::Input(_))));
        assert!(split_into_clips(&video(10), &ann(&[]), 1, 1).is_err());
        assert!(split_into_clips(&video(10), &ann(&[(0, 2)]), 4, 3).is_err());
    }
}
