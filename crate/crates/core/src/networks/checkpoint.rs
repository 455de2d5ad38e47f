//! Binary checkpoint container.
//!
//! All integers are little-endian. Strings are a `u32` byte length followed
//! by UTF-8 bytes.
//!
//! ```text
//! magic        4 bytes  "MCKP"
//! version      u32      1
//! header       string   newline-separated `key=value` lines; architecture
//!                       keys are prefixed `arch.`, free metadata `meta.`
//! sections     u32      count, then per section:
//!   name       string
//!   entries    u32      count, then per entry:
//!     name     string
//!     part     u8       0 = adapted, 1 = shared
//!     ndim     u32
//!     dims     ndim × u64
//!     data     product(dims) × f64
//! stats        momentum f64, layer count u32, then per layer:
//!   name       string
//!   channels   u64
//!   mean, var  channels × f64 each
//! ```
//!
//! Readers reject unknown versions and trailing bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::params::{ParamSet, Partition};
use crate::{Error, Result};

use super::{Arch, RunningStats};

pub const MAGIC: &[u8; 4] = b"MCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arch: Arch,
    pub meta: BTreeMap<String, String>,
    /// Named parameter groups, e.g. `theta`, `critic`, `lslr`.
    pub sections: Vec<(String, ParamSet)>,
    pub stats: RunningStats,
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&ParamSet> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, p)| p)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut header = String::new();
        for (k, v) in self.arch.to_kv() {
            header.push_str(&format!("arch.{k}={v}\n"));
        }
        for (k, v) in &self.meta {
            header.push_str(&format!("meta.{k}={v}\n"));
        }
        put_str(&mut out, &header);
        put_u32(&mut out, self.sections.len() as u32);
        for (name, params) in &self.sections {
            put_str(&mut out, name);
            put_u32(&mut out, params.len() as u32);
            for e in params.iter() {
                put_str(&mut out, &e.name);
                out.push(e.partition.as_byte());
                put_u32(&mut out, e.tensor.ndim() as u32);
                for &d in e.tensor.shape() {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in e.tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&self.stats.momentum.to_le_bytes());
        put_u32(&mut out, self.stats.layers.len() as u32);
        for (name, (mean, var)) in &self.stats.layers {
            put_str(&mut out, name);
            out.extend_from_slice(&(mean.len() as u64).to_le_bytes());
            for v in mean.iter().chain(var) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(4)? != MAGIC {
            return Err(r.fail("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported checkpoint version {version}")));
        }
        let header = r.string()?;
        let mut arch_kv = BTreeMap::new();
        let mut meta = BTreeMap::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| r.fail(&format!("header line `{line}` lacks `=`")))?;
            if let Some(k) = k.strip_prefix("arch.") {
                arch_kv.insert(k.to_string(), v.to_string());
            } else if let Some(k) = k.strip_prefix("meta.") {
                meta.insert(k.to_string(), v.to_string());
            } else {
                return Err(r.fail(&format!("header key `{k}` has no arch./meta. prefix")));
            }
        }
        let arch = Arch::from_kv(&arch_kv)?;
        let n_sections = r.u32()?;
        let mut sections = Vec::new();
        for _ in 0..n_sections {
            let name = r.string()?;
            let n = r.u32()?;
            let mut params = ParamSet::new();
            for _ in 0..n {
                let pname = r.string()?;
                let part = r.take(1)?[0];
                let partition = Partition::from_byte(part)
                    .ok_or_else(|| r.fail(&format!("entry `{pname}` has partition byte {part}")))?;
                let ndim = r.u32()? as usize;
                let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
                let count: usize = shape.iter().product();
                let data = r.f64s(count)?;
                params.push(pname, Tensor::constant(&shape, data)?, partition)?;
            }
            sections.push((name, params));
        }
        let momentum = r.f64()?;
        let n_layers = r.u32()?;
        let mut layers = BTreeMap::new();
        for _ in 0..n_layers {
            let name = r.string()?;
            let c = r.u64()? as usize;
            let mean = r.f64s(c)?;
            let var = r.f64s(c)?;
            layers.insert(name, (mean, var));
        }
        if r.pos != bytes.len() {
            return Err(r.fail(&format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let stats = RunningStats { momentum, layers };
        let expected: Vec<String> = arch.norm_layers().into_iter().map(|(n, _)| n).collect();
        let got: Vec<String> = stats.layers.keys().cloned().collect();
        let mut expected_sorted = expected.clone();
        expected_sorted.sort();
        if expected_sorted != got {
            return Err(r.fail("running statistics do not match the architecture's norm layers"));
        }
        Ok(Self {
            arch,
            meta,
            sections,
            stats,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(crate) struct Reader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub origin: &'a str,
}

impl<'a> Reader<'a> {
    pub fn fail(&self, detail: &str) -> Error {
        Error::Format {
            path: self.origin.to_string(),
            detail: format!("at byte {}: {detail}", self.pos),
        }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.fail(&format!("truncated: wanted {n} more bytes"))),
        }
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n.checked_mul(8).ok_or_else(|| self.fail("array length overflows"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail("string is not UTF-8"))
    }
}
