//! `S2KD` distillation caches.
//!
//! Layout (little-endian): magic `S2KD`, `u8` version, `u64` record count, then
//! per record: `u8` expert tag, `f64` t, and the S2TN tensors eps, x_t, v and
//! the text embedding.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{forward_noise, DiffusionTuple, ExpertTag, TimestepSampler, EXPERT_BOUNDARY};
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::{NumericsError, Rng, Tensor};

pub const KD_MAGIC: &[u8; 4] = b"S2KD";
pub const KD_VERSION: u8 = 1;
const COUNT_OFFSET: u64 = 5;

/// Append-only writer; the record count in the header is patched by [`KdCacheWriter::finish`].
pub struct KdCacheWriter<W: Write + Seek> {
    inner: W,
    count: u64,
}

impl<W: Write + Seek> KdCacheWriter<W> {
    pub fn new(mut inner: W) -> Result<Self> {
        inner.write_all(KD_MAGIC)?;
        inner.write_all(&[KD_VERSION])?;
        inner.write_all(&0u64.to_le_bytes())?;
        Ok(Self { inner, count: 0 })
    }

    pub fn append(&mut self, rec: &DiffusionTuple) -> Result<()> {
        self.inner.write_all(&[rec.expert.code()])?;
        self.inner.write_all(&rec.t.to_le_bytes())?;
        for t in [&rec.eps, &rec.x_t, &rec.v, &rec.text] {
            write_tensor(&mut self.inner, t)?;
        }
        self.count += 1;
        Ok(())
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn finish(mut self) -> Result<W> {
        let end = self.inner.stream_position()?;
        self.inner.seek(SeekFrom::Start(COUNT_OFFSET))?;
        self.inner.write_all(&self.count.to_le_bytes())?;
        self.inner.seek(SeekFrom::Start(end))?;
        self.inner.flush()?;
        Ok(self.inner)
    }
}

pub struct KdCacheReader<R: Read> {
    inner: R,
    remaining: u64,
    count: u64,
}

fn format_err(e: std::io::Error, what: &str) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format(format!("cache truncated in {what}"))
    } else {
        Error::Io(e)
    }
}

impl<R: Read> KdCacheReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut head = [0u8; 13];
        inner.read_exact(&mut head).map_err(|e| format_err(e, "header"))?;
        if &head[..4] != KD_MAGIC {
            return Err(Error::Format(format!("bad cache magic {:?}", &head[..4])));
        }
        if head[4] != KD_VERSION {
            return Err(Error::Format(format!("unsupported cache version {}", head[4])));
        }
        let count = u64::from_le_bytes(head[5..].try_into().expect("8 bytes"));
        Ok(Self { inner, remaining: count, count })
    }

    /// Record count from the header.
    pub fn record_count(&self) -> u64 {
        self.count
    }

    fn record(&mut self) -> Result<DiffusionTuple> {
        let mut head = [0u8; 9];
        self.inner.read_exact(&mut head).map_err(|e| format_err(e, "record header"))?;
        let expert = ExpertTag::from_code(head[0]).ok_or_else(|| Error::Format(format!("unknown expert tag {}", head[0])))?;
        let t = f64::from_le_bytes(head[1..].try_into().expect("8 bytes"));
        let mut next = || -> Result<Tensor> {
            read_tensor(&mut self.inner).map_err(|e| match e {
                NumericsError::Io(io) => format_err(io, "record tensor"),
                other => Error::Format(other.to_string()),
            })
        };
        let (eps, x_t, v, text) = (next()?, next()?, next()?, next()?);
        if eps.shape() != x_t.shape() || v.shape() != x_t.shape() {
            return Err(Error::Format(format!("record shapes disagree: {:?} {:?} {:?}", eps.shape(), x_t.shape(), v.shape())));
        }
        Ok(DiffusionTuple { expert, t, eps, x_t, v, text })
    }
}

impl<R: Read> Iterator for KdCacheReader<R> {
    type Item = Result<DiffusionTuple>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let rec = self.record();
        if rec.is_err() {
            self.remaining = 0;
        }
        Some(rec)
    }
}

pub fn write_kd_cache(path: &Path, records: &[DiffusionTuple]) -> Result<()> {
    let mut w = KdCacheWriter::new(BufWriter::new(File::create(path)?))?;
    for r in records {
        w.append(r)?;
    }
    w.finish()?;
    Ok(())
}

pub fn read_kd_cache(path: &Path) -> Result<Vec<DiffusionTuple>> {
    KdCacheReader::new(BufReader::new(File::open(path)?))?.collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KdBuildSpec {
    pub records: usize,
    pub sampler: TimestepSampler,
    /// Tag records by expert (`High` for `t >= boundary`) instead of `Single`.
    pub two_expert: bool,
    pub boundary: f64,
}

impl Default for KdBuildSpec {
    fn default() -> Self {
        Self { records: 512, sampler: TimestepSampler::Uniform, two_expert: false, boundary: EXPERT_BOUNDARY }
    }
}

/// Draws `spec.records` tuples and appends them to `out`.
///
/// `data` yields a clean latent and a text embedding; `teacher` maps
/// `(expert, x_t, t, text)` to a velocity.
pub fn build_kd_cache<W: Write + Seek>(
    teacher: &mut dyn FnMut(ExpertTag, &Tensor, f64, &Tensor) -> Result<Tensor>,
    data: &mut dyn FnMut(usize, &mut Rng) -> Result<(Tensor, Tensor)>,
    spec: &KdBuildSpec,
    rng: &mut Rng,
    out: &mut KdCacheWriter<W>,
) -> Result<usize> {
    for i in 0..spec.records {
        let (x0, text) = data(i, rng)?;
        let t = spec.sampler.sample(rng);
        let eps = rng.normal_tensor(x0.shape(), 1.0);
        let x_t = forward_noise(&x0, t, &eps)?;
        let expert = if spec.two_expert { ExpertTag::for_timestep(t, spec.boundary) } else { ExpertTag::Single };
        let v = teacher(expert, &x_t, t, &text)?;
        if let Some((index, &value)) = v.data().iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Numerics(NumericsError::NonFinite { op: "teacher velocity".into(), index, value }));
        }
        out.append(&DiffusionTuple { expert, t, eps, x_t, v, text })?;
    }
    Ok(spec.records)
}
