//! Episode corpus files.
//!
//! All integers little-endian; strings are a `u32` byte length plus UTF-8.
//!
//! ```text
//! magic      4 bytes  "MCEP"
//! version    u32      1
//! seed       u64      episode-sampling seed
//! origin     string   generator name, informational
//! ndim       u32      sample rank, then ndim × u64 sample dims
//! manifest   u32      class count, then per class:
//!   id       string
//!   split    u8       0 = train, 1 = val, 2 = test
//!   count    u32      number of samples
//! records    u32      record count, then per record:
//!   id       string   must name a manifest class
//!   data     count × product(dims) × f64
//! ```
//!
//! Every manifest class needs exactly one record, in any order.

use std::collections::HashMap;
use std::path::Path;

use crate::networks::checkpoint::Reader;
use crate::{Error, Result};

use super::{ClassData, FamilyKind, Split, TaskFamily};

pub const CORPUS_MAGIC: &[u8; 4] = b"MCEP";
pub const CORPUS_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

impl TaskFamily {
    pub fn to_corpus_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CORPUS_MAGIC);
        put_u32(&mut out, CORPUS_VERSION);
        out.extend_from_slice(&self.seed.to_le_bytes());
        put_str(&mut out, &self.origin);
        put_u32(&mut out, self.sample_shape.len() as u32);
        for &d in &self.sample_shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        put_u32(&mut out, self.classes.len() as u32);
        for c in &self.classes {
            put_str(&mut out, &c.id);
            out.push(c.split.as_byte());
            put_u32(&mut out, c.samples.len() as u32);
        }
        put_u32(&mut out, self.classes.len() as u32);
        for c in &self.classes {
            put_str(&mut out, &c.id);
            for v in c.samples.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write_episode_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_corpus_bytes())?;
        Ok(())
    }

    pub fn from_corpus_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != CORPUS_MAGIC {
            return Err(r.fail("not an episode corpus (bad magic)"));
        }
        let version = r.u32()?;
        if version != CORPUS_VERSION {
            return Err(r.fail(&format!("unsupported corpus version {version}")));
        }
        let seed = r.u64()?;
        let generator = r.string()?;
        let ndim = r.u32()? as usize;
        let sample_shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let sample_len: usize = sample_shape.iter().product();
        if sample_len == 0 {
            return Err(r.fail("empty sample shape"));
        }
        let n_classes = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(n_classes);
        let mut by_id = HashMap::new();
        for i in 0..n_classes {
            let id = r.string()?;
            let sb = r.take(1)?[0];
            let split = Split::from_byte(sb)
                .ok_or_else(|| r.fail(&format!("manifest entry {i} (`{id}`) has split byte {sb}")))?;
            let count = r.u32()? as usize;
            if by_id.insert(id.clone(), i).is_some() {
                return Err(r.fail(&format!("manifest declares class `{id}` twice")));
            }
            manifest.push((id, split, count));
        }
        let n_records = r.u32()? as usize;
        let mut samples: Vec<Option<Vec<Vec<f64>>>> = vec![None; n_classes];
        for rec in 0..n_records {
            let id = r.string()?;
            let &i = by_id
                .get(&id)
                .ok_or_else(|| r.fail(&format!("record {rec} names undeclared class `{id}`")))?;
            if samples[i].is_some() {
                return Err(r.fail(&format!("record {rec} repeats class `{id}`")));
            }
            let count = manifest[i].2;
            let flat = r
                .f64s(count * sample_len)
                .map_err(|_| r.fail(&format!("record {rec} (`{id}`) truncated")))?;
            samples[i] = Some(flat.chunks_exact(sample_len).map(<[f64]>::to_vec).collect());
        }
        if r.pos != bytes.len() {
            return Err(r.fail(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let classes = manifest
            .into_iter()
            .zip(samples)
            .map(|((id, split, _), s)| match s {
                Some(samples) => Ok(ClassData { id, split, samples }),
                None => Err(Error::Format {
                    path: origin.to_string(),
                    detail: format!("declared class `{id}` has no sample record"),
                }),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TaskFamily {
            kind: FamilyKind::FileCorpus,
            origin: generator,
            seed,
            sample_shape,
            classes,
        })
    }

    pub fn load_episode_file(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_corpus_bytes(&bytes, &path.display().to_string())
    }
}
