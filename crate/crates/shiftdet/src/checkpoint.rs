//! Checkpoint serialization: all weight maps (student, teacher, auxiliary)
//! plus optimizer momentum, the training-state scalars, and a metadata
//! record (format version, detector config hash, step count). Loading
//! rejects checkpoints whose config hash differs from the running config.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::dynaug::GainState;
use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};

const MAGIC: &[u8; 8] = b"SHIFTDET";
pub const FORMAT_VERSION: u32 = 1;

/// Training phase marker stored in checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    BurnIn,
    Adapt,
}

impl Phase {
    fn to_byte(self) -> u8 {
        match self {
            Phase::BurnIn => 0,
            Phase::Adapt => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Phase::BurnIn),
            1 => Ok(Phase::Adapt),
            other => Err(Error::Checkpoint(format!("unknown phase tag {other}"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::BurnIn => "burn-in",
            Phase::Adapt => "adapt",
        }
    }
}

/// Everything a resumed run needs.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: u64,
    pub phase: Phase,
    pub student: ParamSet,
    pub teacher: ParamSet,
    pub vel_student: ParamSet,
    pub aux: ParamSet,
    pub vel_aux: ParamSet,
    pub gain: GainState,
}

struct Writer<'a>(&'a mut Vec<u8>);

impl Writer<'_> {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn params(&mut self, p: &ParamSet) {
        self.u32(p.len() as u32);
        for (name, t) in p.iter() {
            let bytes = name.as_bytes();
            self.u32(bytes.len() as u32);
            self.0.extend_from_slice(bytes);
            self.u8(t.shape.len() as u8);
            for &d in &t.shape {
                self.u32(d as u32);
            }
            for v in &t.data {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn params(&mut self) -> Result<ParamSet> {
        let count = self.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = self.u32()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("non-utf8 parameter name".into()))?;
            let ndim = self.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = self.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            set.register(&name, Tensor { shape, data });
        }
        Ok(set)
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut w = Writer(&mut out);
    w.u32(FORMAT_VERSION);
    w.u64(ckpt.config_hash);
    w.u64(ckpt.step);
    w.u8(ckpt.phase.to_byte());
    w.f64(ckpt.gain.gain);
    w.u8(ckpt.gain.baseline.is_some() as u8);
    w.f64(ckpt.gain.baseline.unwrap_or(0.0));
    w.f64(ckpt.gain.warm_sum);
    w.u64(ckpt.gain.warm_count as u64);
    for set in [
        &ckpt.student,
        &ckpt.teacher,
        &ckpt.vel_student,
        &ckpt.aux,
        &ckpt.vel_aux,
    ] {
        w.params(set);
    }
    out
}

/// Decode and validate against the expected detector config hash. The gain
/// controller's tuning constants are taken from `gain_template`; only its
/// dynamic state comes from the file.
pub fn decode(bytes: &[u8], expected_hash: u64, gain_template: &GainState) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint".into()));
    }
    let mut r = Reader {
        buf: bytes,
        pos: 8,
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let config_hash = r.u64()?;
    if config_hash != expected_hash {
        return Err(Error::Checkpoint(format!(
            "config hash {config_hash:#x} does not match current detector config {expected_hash:#x}"
        )));
    }
    let step = r.u64()?;
    let phase = Phase::from_byte(r.u8()?)?;
    let mut gain = gain_template.clone();
    gain.gain = r.f64()?;
    let has_baseline = r.u8()? != 0;
    let baseline = r.f64()?;
    gain.baseline = has_baseline.then_some(baseline);
    gain.warm_sum = r.f64()?;
    gain.warm_count = r.u64()? as usize;
    let student = r.params()?;
    let teacher = r.params()?;
    let vel_student = r.params()?;
    let aux = r.params()?;
    let vel_aux = r.params()?;
    Ok(Checkpoint {
        config_hash,
        step,
        phase,
        student,
        teacher,
        vel_student,
        aux,
        vel_aux,
        gain,
    })
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&encode(ckpt))?;
    Ok(())
}

pub fn load(path: &Path, expected_hash: u64, gain_template: &GainState) -> Result<Checkpoint> {
    decode(&fs::read(path)?, expected_hash, gain_template)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn tiny_set(seed: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.register(
            "a.w",
            Tensor {
                shape: vec![2, 3],
                data: vec![seed, 1.5, -2.0, 0.0, 3.25, -0.5],
            },
        );
        p.register(
            "a.b",
            Tensor {
                shape: vec![2],
                data: vec![seed * 2.0, -1.0],
            },
        );
        p
    }

    fn sample() -> Checkpoint {
        let mut gain = GainState::default();
        gain.gain = 1.25;
        gain.baseline = Some(0.125);
        Checkpoint {
            config_hash: 0xdead_beef,
            step: 321,
            phase: Phase::Adapt,
            student: tiny_set(1.0),
            teacher: tiny_set(2.0),
            vel_student: tiny_set(0.0),
            aux: tiny_set(3.0),
            vel_aux: tiny_set(0.5),
            gain,
        }
    }

    #[test]
    fn round_trips_bit_exactly() {
        let ckpt = sample();
        let bytes = encode(&ckpt);
        let back = decode(&bytes, 0xdead_beef, &GainState::default()).unwrap();
        assert_eq!(back.step, 321);
        assert_eq!(back.phase, Phase::Adapt);
        assert_eq!(back.student.fingerprint(), ckpt.student.fingerprint());
        assert_eq!(back.teacher.fingerprint(), ckpt.teacher.fingerprint());
        assert_eq!(back.aux.fingerprint(), ckpt.aux.fingerprint());
        assert_eq!(back.gain.gain, 1.25);
        assert_eq!(back.gain.baseline, Some(0.125));
        // Deterministic encoding.
        assert_eq!(bytes, encode(&back));
    }

    #[test]
    fn rejects_wrong_hash_version_magic() {
        let ckpt = sample();
        let bytes = encode(&ckpt);
        assert!(decode(&bytes, 0x1234, &GainState::default()).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(decode(&bad_magic, 0xdead_beef, &GainState::default()).is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 99;
        assert!(decode(&bad_version, 0xdead_beef, &GainState::default()).is_err());
        assert!(decode(&bytes[..40], 0xdead_beef, &GainState::default()).is_err());
    }
}
