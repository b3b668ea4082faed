//! Frame rendering for the synthetic motion families.

use std::f32::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{CycleAnnotation, MotionFamily, MotionSpec, SyntheticVideo, DEFAULT_CLIP_LEN, FRAME_SIZE};
use crate::error::Result;

const BACKGROUND: f32 = 0.05;
const DISTRACTOR: f32 = 0.55;

/// Renders `spec` deterministically from `seed`.
pub fn generate_video(spec: &MotionSpec, seed: u64) -> Result<(SyntheticVideo, CycleAnnotation)> {
    spec.validate(DEFAULT_CLIP_LEN)?;
    let annotation = CycleAnnotation::of_spec(spec);
    let t = spec.total_frames();
    let (h, w) = (FRAME_SIZE, FRAME_SIZE);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let scene = Scene::sample(spec, &mut rng);
    let distractors: Vec<(usize, usize)> = (0..spec.distractor_count)
        .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
        .collect();

    let mut frames = vec![0.0f32; t * h * w];
    let mut drift = Drift::new(&mut rng);
    for (i, frame) in frames.chunks_mut(h * w).enumerate() {
        let phase = phase_at(spec, i);
        frame.fill(BACKGROUND);
        match spec.family {
            MotionFamily::DriftingNoise => {
                let (y, x, r) = drift.step(&mut rng);
                draw_blob(frame, w, y, x, r, 0.9);
            }
            _ => scene.draw(spec, phase, frame, w),
        }
        for &(y, x) in &distractors {
            let p = &mut frame[y * w + x];
            *p = p.max(DISTRACTOR);
        }
        if spec.noise_level > 0.0 {
            for p in frame.iter_mut() {
                *p += spec.noise_level * (rng.random::<f32>() - 0.5);
            }
        }
        for p in frame.iter_mut() {
            *p = p.clamp(0.0, 1.0);
        }
    }

    Ok((
        SyntheticVideo {
            frames,
            t,
            h,
            w,
            spec: *spec,
            seed,
        },
        annotation,
    ))
}

/// Phase in `(0, 1)` measured at the frame centre, or `None` outside cycles.
fn phase_at(spec: &MotionSpec, frame: usize) -> Option<f32> {
    let start = spec.phase_offset as usize;
    let len = spec.cycle_length as usize;
    let end = start + spec.cycle_count as usize * len;
    if frame < start || frame >= end {
        return None;
    }
    let k = (frame - start) % len;
    Some((k as f32 + 0.5) / len as f32)
}

/// Raised-cosine excursion: 0 at rest, 1 at mid-cycle, positive throughout.
fn bump(phase: Option<f32>) -> f32 {
    phase.map_or(0.0, |p| 0.5 * (1.0 - (2.0 * PI * p).cos()))
}

struct Scene {
    y: f32,
    x: f32,
    brightness: f32,
}

impl Scene {
    fn sample(spec: &MotionSpec, rng: &mut ChaCha8Rng) -> Self {
        let size = FRAME_SIZE as f32;
        let (y, x) = match spec.family {
            MotionFamily::OscillatingSquare => (
                rng.random_range(1.0..size - 5.0),
                rng.random_range(0.5..(size - 4.5 - spec.amplitude).max(1.0)),
            ),
            MotionFamily::BouncingBall => (
                size - 3.0 - rng.random_range(0.0..1.5),
                rng.random_range(3.0..size - 3.0),
            ),
            _ => (
                size / 2.0 + rng.random_range(-1.5..1.5),
                size / 2.0 + rng.random_range(-1.5..1.5),
            ),
        };
        Scene {
            y,
            x,
            brightness: rng.random_range(0.75..1.0),
        }
    }

    fn draw(&self, spec: &MotionSpec, phase: Option<f32>, frame: &mut [f32], w: usize) {
        let a = spec.amplitude;
        match spec.family {
            MotionFamily::OscillatingSquare => {
                draw_box(frame, w, self.y, self.x + a * bump(phase), 4.0, self.brightness);
            }
            MotionFamily::BouncingBall => {
                let lift = phase.map_or(0.0, |p| (PI * p).sin());
                draw_disc(frame, w, self.y - a * lift, self.x, 2.0, self.brightness);
            }
            MotionFamily::PulsingBlob => {
                let r = 1.2 + 0.35 * a * bump(phase);
                draw_blob(frame, w, self.y, self.x, r, self.brightness);
            }
            MotionFamily::RotatingBar => {
                let theta = phase.map_or(0.0, |p| PI * p);
                draw_bar(frame, w, self.y, self.x, theta, 2.0 + a, self.brightness);
            }
            MotionFamily::DriftingNoise => {}
        }
    }
}

/// Smooth aperiodic random walk of a blob.
struct Drift {
    y: f32,
    x: f32,
    vy: f32,
    vx: f32,
    r: f32,
}

impl Drift {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        Drift {
            y: rng.random_range(4.0..12.0),
            x: rng.random_range(4.0..12.0),
            vy: 0.0,
            vx: 0.0,
            r: rng.random_range(1.5..2.5),
        }
    }

    fn step(&mut self, rng: &mut ChaCha8Rng) -> (f32, f32, f32) {
        self.vy = (0.8 * self.vy + rng.random_range(-0.3..0.3)).clamp(-0.6, 0.6);
        self.vx = (0.8 * self.vx + rng.random_range(-0.3..0.3)).clamp(-0.6, 0.6);
        self.y = (self.y + self.vy).clamp(2.0, 13.0);
        self.x = (self.x + self.vx).clamp(2.0, 13.0);
        self.r = (self.r + rng.random_range(-0.1..0.1)).clamp(1.2, 3.0);
        (self.y, self.x, self.r)
    }
}

fn overlap(a0: f32, a1: f32, b0: f32, b1: f32) -> f32 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

fn put(frame: &mut [f32], idx: usize, v: f32) {
    frame[idx] = frame[idx].max(v);
}

/// Axis-aligned square with exact pixel coverage.
fn draw_box(frame: &mut [f32], w: usize, y: f32, x: f32, side: f32, level: f32) {
    let h = frame.len() / w;
    for i in 0..h {
        let oy = overlap(i as f32, i as f32 + 1.0, y, y + side);
        if oy == 0.0 {
            continue;
        }
        for j in 0..w {
            let ox = overlap(j as f32, j as f32 + 1.0, x, x + side);
            if ox > 0.0 {
                put(frame, i * w + j, BACKGROUND + (level - BACKGROUND) * ox * oy);
            }
        }
    }
}

fn draw_disc(frame: &mut [f32], w: usize, cy: f32, cx: f32, r: f32, level: f32) {
    let h = frame.len() / w;
    for i in 0..h {
        for j in 0..w {
            let d = ((i as f32 + 0.5 - cy).powi(2) + (j as f32 + 0.5 - cx).powi(2)).sqrt();
            let cov = (r + 0.5 - d).clamp(0.0, 1.0);
            if cov > 0.0 {
                put(frame, i * w + j, BACKGROUND + (level - BACKGROUND) * cov);
            }
        }
    }
}

fn draw_blob(frame: &mut [f32], w: usize, cy: f32, cx: f32, sigma: f32, level: f32) {
    let h = frame.len() / w;
    for i in 0..h {
        for j in 0..w {
            let d2 = (i as f32 + 0.5 - cy).powi(2) + (j as f32 + 0.5 - cx).powi(2);
            put(frame, i * w + j, BACKGROUND + (level - BACKGROUND) * (-d2 / (2.0 * sigma * sigma)).exp());
        }
    }
}

fn draw_bar(frame: &mut [f32], w: usize, cy: f32, cx: f32, theta: f32, half_len: f32, level: f32) {
    let h = frame.len() / w;
    let (s, c) = theta.sin_cos();
    for i in 0..h {
        for j in 0..w {
            let dy = i as f32 + 0.5 - cy;
            let dx = j as f32 + 0.5 - cx;
            let along = dx * c + dy * s;
            let across = (-dx * s + dy * c).abs();
            let cov_across = (1.25 - across).clamp(0.0, 1.0);
            let cov_along = (half_len + 0.5 - along.abs()).clamp(0.0, 1.0);
            let cov = cov_across * cov_along;
            if cov > 0.0 {
                put(frame, i * w + j, BACKGROUND + (level - BACKGROUND) * cov);
            }
        }
    }
}

/// Templated caption describing family, tempo, and scene. Never mentions
/// the number of cycles.
pub fn caption_of(spec: &MotionSpec) -> String {
    let subject = match spec.family {
        MotionFamily::OscillatingSquare => "a bright square swinging side to side",
        MotionFamily::BouncingBall => "a small ball bouncing up and down",
        MotionFamily::PulsingBlob => "a soft blob pulsing in and out",
        MotionFamily::RotatingBar => "a thin bar rotating around its center",
        MotionFamily::DriftingNoise => "a faint shape drifting with no repeating motion",
    };
    let tempo = if !spec.family.is_periodic() {
        ""
    } else if spec.cycle_length <= 8 {
        " quickly"
    } else if spec.cycle_length <= 12 {
        " steadily"
    } else {
        " slowly"
    };
    let background = if spec.noise_level < 0.1 {
        " on a clean background"
    } else {
        " over a noisy background"
    };
    let clutter = match spec.distractor_count {
        0 => "",
        1 => " with one stray dot",
        _ => " with a few stray dots",
    };
    format!("{subject}{tempo}{background}{clutter}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(family: MotionFamily) -> MotionSpec {
        MotionSpec {
            family,
            cycle_count: 5,
            cycle_length: 8,
            phase_offset: 0,
            tail: 3,
            amplitude: 5.0,
            noise_level: 0.1,
            distractor_count: 2,
        }
    }

    #[test]
    fn drifting_noise_has_no_cycles() {
        let s = MotionSpec {
            family: MotionFamily::DriftingNoise,
            cycle_count: 0,
            phase_offset: 40,
            ..spec(MotionFamily::DriftingNoise)
        };
        let (v, a) = generate_video(&s, 3).unwrap();
        assert_eq!(a.count, 0);
        assert!(a.cycle_intervals.is_empty());
        assert_eq!(v.t, 43);
    }

    #[test]
    fn square_intervals_are_definitional() {
        let mut s = spec(MotionFamily::OscillatingSquare);
        s.tail = 0;
        let (v, a) = generate_video(&s, 11).unwrap();
        assert_eq!(a.count, 5);
        assert_eq!(a.cycle_intervals, vec![(0, 8), (8, 16), (16, 24), (24, 32), (32, 40)]);
        assert_eq!((v.t, v.h, v.w), (40, 16, 16));
    }

    #[test]
    fn generation_is_deterministic() {
        for fam in MotionFamily::ALL {
            let mut s = spec(fam);
            if !fam.is_periodic() {
                s.cycle_count = 0;
            }
            let (a, _) = generate_video(&s, 99).unwrap();
            let (b, _) = generate_video(&s, 99).unwrap();
            assert_eq!(a.frames, b.frames);
            assert!(a.frames.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn cycle_longer_than_clip_is_rejected() {
        let mut s = spec(MotionFamily::PulsingBlob);
        s.cycle_length = 33;
        assert!(matches!(generate_video(&s, 1), Err(crate::Error::Spec(_))));
    }

    #[test]
    fn frames_repeat_every_cycle_without_noise() {
        let mut s = spec(MotionFamily::RotatingBar);
        s.noise_level = 0.0;
        let (v, _) = generate_video(&s, 5).unwrap();
        assert_eq!(v.frame(1), v.frame(9));
        assert_ne!(v.frame(1), v.frame(2));
        // Still frames before and after the cycles match each other.
        assert_eq!(v.frame(40), v.frame(42));
    }

    #[test]
    fn captions() {
        assert!(caption_of(&spec(MotionFamily::PulsingBlob)).contains("pulsing"));
        let mut d = spec(MotionFamily::DriftingNoise);
        d.cycle_count = 0;
        assert!(caption_of(&d).contains("no repeating motion"));
        let a = spec(MotionFamily::BouncingBall);
        let mut b = a;
        b.cycle_count = 2;
        assert_eq!(caption_of(&a), caption_of(&b));
    }
}
