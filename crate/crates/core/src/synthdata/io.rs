//! Binary dataset container.
//!
//! Layout (all integers little-endian): magic `PCNT`, version `u32 = 1`,
//! video count `u32`; then per video: seed `u64`, motion spec (family `u8`,
//! cycle count, cycle length, phase offset, tail, distractor count as `u32`,
//! amplitude and noise level as `f32`), `T`, `H`, `W` as `u32`, `T*H*W`
//! frames as `f32`, annotation count `u32` followed by that many
//! `(start, end)` `u32` pairs.

use std::fs;
use std::path::Path;

use super::spec::{CycleAnnotation, MotionFamily, MotionSpec, Sample, SyntheticVideo};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"PCNT";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(samples: &[Sample]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        let v = &s.video;
        let sp = &v.spec;
        out.extend_from_slice(&v.seed.to_le_bytes());
        out.push(sp.family.code());
        for x in [sp.cycle_count, sp.cycle_length, sp.phase_offset, sp.tail, sp.distractor_count] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&sp.amplitude.to_le_bytes());
        out.extend_from_slice(&sp.noise_level.to_le_bytes());
        for x in [v.t, v.h, v.w] {
            out.extend_from_slice(&(x as u32).to_le_bytes());
        }
        for f in &v.frames {
            out.extend_from_slice(&f.to_le_bytes());
        }
        out.extend_from_slice(&s.annotation.count.to_le_bytes());
        for &(a, b) in &s.annotation.cycle_intervals {
            out.extend_from_slice(&a.to_le_bytes());
            out.extend_from_slice(&b.to_le_bytes());
        }
    }
    out
}

/// Cursor over a byte buffer that reports the offset of any failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub fn fail(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.offset(),
            message: message.into(),
        }
    }

    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated: need {n} bytes, {} remain",
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    pub fn is_at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<Sample>> {
    let mut r = Reader::new(buf);
    if r.bytes(4)? != DATASET_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, expected PCNT".into(),
        });
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: DATASET_VERSION,
        });
    }
    let n = r.u32()? as usize;
    let mut samples = Vec::with_capacity(n.min(1 << 16));
    for _ in 0..n {
        let seed = r.u64()?;
        let code = r.u8()?;
        let family = MotionFamily::from_code(code).ok_or_else(|| r.fail(format!("unknown family code {code}")))?;
        let cycle_count = r.u32()?;
        let cycle_length = r.u32()?;
        let phase_offset = r.u32()?;
        let tail = r.u32()?;
        let distractor_count = r.u32()?;
        let amplitude = r.f32()?;
        let noise_level = r.f32()?;
        let (t, h, w) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let n_vals = t
            .checked_mul(h)
            .and_then(|x| x.checked_mul(w))
            .filter(|&x| x.saturating_mul(4) <= buf.len())
            .ok_or_else(|| r.fail(format!("implausible frame extents {t}x{h}x{w}")))?;
        let raw = r.bytes(n_vals * 4)?;
        let frames = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let count = r.u32()?;
        if count as usize > buf.len() / 8 {
            return Err(r.fail(format!("implausible interval count {count}")));
        }
        let mut cycle_intervals = Vec::with_capacity(count as usize);
        for _ in 0..count {
            cycle_intervals.push((r.u32()?, r.u32()?));
        }
        samples.push(Sample {
            video: SyntheticVideo {
                frames,
                t,
                h,
                w,
                spec: MotionSpec {
                    family,
                    cycle_count,
                    cycle_length,
                    phase_offset,
                    tail,
                    amplitude,
                    noise_level,
                    distractor_count,
                },
                seed,
            },
            annotation: CycleAnnotation { count, cycle_intervals },
        });
    }
    if !r.is_at_end() {
        return Err(r.fail("trailing bytes after last video"));
    }
    Ok(samples)
}

pub fn write_dataset(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    fs::write(path, encode_dataset(samples))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Sample>> {
    decode_dataset(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::corpus::{generate_corpus, CorpusConfig, Profile};

    fn small() -> Vec<Sample> {
        generate_corpus(Profile::All, 6, 42, &CorpusConfig::default()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.pcnt");
        write_dataset(&p, &d).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), d);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode_dataset(&small());
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode_dataset(&small());
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode_dataset(&bytes),
            Err(Error::UnsupportedVersion { found: 2, .. })
        ));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_dataset(&small());
        let cut = bytes.len() - 3;
        match decode_dataset(&bytes[..cut]) {
            Err(Error::Format { offset, .. }) => assert!(offset > 12 && offset <= cut as u64),
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
