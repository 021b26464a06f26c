//! Binary checkpoint codec.
//!
//! Layout (all integers little endian):
//!
//! ```text
//! "PNDA"  u32 version
//! u32 meta_len   meta block (meta_len bytes)
//! u32 tensor_count
//!   per tensor: u32 name_len, name, u32 ndim, u64 dims[ndim], f32 data[prod(dims)]
//! u32 crc32 of every preceding byte
//! ```
//!
//! The meta block is `u32 count` followed by `u32 key_len, key, u8 tag,
//! payload` entries. Encoding is a pure function of the value, so
//! save -> load -> save is byte identical.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::config::{make_run_config, ConfigValue, RunConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PNDA";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum MetaValue {
    Int(i64),
    U64(u64),
    Float(f64),
    Bool(bool),
    Str(String),
    List(Vec<f64>),
    Bytes(Vec<u8>),
}

impl MetaValue {
    fn tag(&self) -> u8 {
        match self {
            MetaValue::Int(_) => 0,
            MetaValue::U64(_) => 1,
            MetaValue::Float(_) => 2,
            MetaValue::Bool(_) => 3,
            MetaValue::Str(_) => 4,
            MetaValue::List(_) => 5,
            MetaValue::Bytes(_) => 6,
        }
    }
}

impl From<ConfigValue> for MetaValue {
    fn from(v: ConfigValue) -> Self {
        match v {
            ConfigValue::Int(i) => MetaValue::Int(i),
            ConfigValue::Float(f) => MetaValue::Float(f),
            ConfigValue::Bool(b) => MetaValue::Bool(b),
            ConfigValue::Str(s) => MetaValue::Str(s),
            ConfigValue::List(l) => MetaValue::List(l),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, MetaValue)>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(what: &str) -> Error {
    Error::CorruptCheckpoint(what.to_string())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        core::str::from_utf8(b)
            .map(String::from)
            .map_err(|_| corrupt("invalid utf-8 in name"))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_meta(&mut self, key: impl Into<String>, v: MetaValue) {
        self.meta.push((key.into(), v));
    }

    pub fn push_tensor(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn meta(&self, key: &str) -> Option<&MetaValue> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(k, _)| k == name).map(|(_, v)| v)
    }

    pub fn meta_u64(&self, key: &str) -> Result<u64> {
        match self.meta(key) {
            Some(MetaValue::U64(v)) => Ok(*v),
            _ => Err(Error::CorruptCheckpoint(format!(
                "missing u64 entry `{key}`"
            ))),
        }
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        match self.meta(key) {
            Some(MetaValue::Str(s)) => Some(s),
            _ => None,
        }
    }

    /// Tensors whose name starts with `prefix`, with the prefix removed.
    pub fn tensors_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = (&'a str, &'a Tensor<f32>)> + 'a {
        self.tensors
            .iter()
            .filter_map(move |(k, v)| k.strip_prefix(prefix).map(|n| (n, v)))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut meta = Vec::new();
        put_u32(&mut meta, self.meta.len() as u32);
        for (k, v) in &self.meta {
            put_str(&mut meta, k);
            meta.push(v.tag());
            match v {
                MetaValue::Int(i) => meta.extend_from_slice(&i.to_le_bytes()),
                MetaValue::U64(u) => meta.extend_from_slice(&u.to_le_bytes()),
                MetaValue::Float(f) => meta.extend_from_slice(&f.to_bits().to_le_bytes()),
                MetaValue::Bool(b) => meta.push(u8::from(*b)),
                MetaValue::Str(s) => put_str(&mut meta, s),
                MetaValue::List(l) => {
                    put_u32(&mut meta, l.len() as u32);
                    for f in l {
                        meta.extend_from_slice(&f.to_bits().to_le_bytes());
                    }
                }
                MetaValue::Bytes(b) => {
                    put_u32(&mut meta, b.len() as u32);
                    meta.extend_from_slice(b);
                }
            }
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        put_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.tensors.len() as u32);
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing PNDA header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(corrupt("checksum mismatch"));
        }

        let mut r = Reader { buf: body, pos: 8 };
        let meta_len = r.u32()? as usize;
        let mut m = Reader {
            buf: r.take(meta_len)?,
            pos: 0,
        };
        let count = m.u32()? as usize;
        let mut meta = Vec::new();
        for _ in 0..count {
            let key = m.string()?;
            let v = match m.u8()? {
                0 => MetaValue::Int(m.u64()? as i64),
                1 => MetaValue::U64(m.u64()?),
                2 => MetaValue::Float(f64::from_bits(m.u64()?)),
                3 => MetaValue::Bool(m.u8()? != 0),
                4 => MetaValue::Str(m.string()?),
                5 => {
                    let n = m.u32()? as usize;
                    if n.saturating_mul(8) > m.remaining() {
                        return Err(corrupt("list length exceeds meta block"));
                    }
                    let mut l = Vec::with_capacity(n);
                    for _ in 0..n {
                        l.push(f64::from_bits(m.u64()?));
                    }
                    MetaValue::List(l)
                }
                6 => {
                    let n = m.u32()? as usize;
                    MetaValue::Bytes(m.take(n)?.to_vec())
                }
                t => return Err(Error::CorruptCheckpoint(format!("unknown meta tag {t}"))),
            };
            meta.push((key, v));
        }
        if m.remaining() != 0 {
            return Err(corrupt("trailing bytes in meta block"));
        }

        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            if ndim.saturating_mul(8) > r.remaining() {
                return Err(corrupt("tensor rank exceeds data"));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut numel: usize = 1;
            for _ in 0..ndim {
                let d = usize::try_from(r.u64()?).map_err(|_| corrupt("dimension overflow"))?;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| corrupt("dimension overflow"))?;
                shape.push(d);
            }
            let bytes = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| corrupt("dimension overflow"))?,
            )?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                .collect();
            tensors.push((name, Tensor::from_vec(&shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes after tensor table"));
        }
        Ok(Self { meta, tensors })
    }
}

/// Stores a config as `config.<key>` meta entries.
pub fn push_config(ck: &mut Checkpoint, cfg: &RunConfig) {
    for (k, v) in cfg.to_entries() {
        ck.push_meta(format!("config.{k}"), v.into());
    }
}

/// Rebuilds the config stored by [`push_config`].
pub fn read_config(ck: &Checkpoint) -> Result<RunConfig> {
    let mut entries = Vec::new();
    for (k, v) in &ck.meta {
        let Some(key) = k.strip_prefix("config.") else {
            continue;
        };
        let cv = match v {
            MetaValue::Int(i) => ConfigValue::Int(*i),
            MetaValue::Float(f) => ConfigValue::Float(*f),
            MetaValue::Bool(b) => ConfigValue::Bool(*b),
            MetaValue::Str(s) => ConfigValue::Str(s.clone()),
            MetaValue::List(l) => ConfigValue::List(l.clone()),
            _ => {
                return Err(Error::CorruptCheckpoint(format!(
                    "config entry `{key}` has a non-config type"
                )))
            }
        };
        entries.push((key.to_string(), cv));
    }
    if entries.is_empty() {
        return Err(corrupt("checkpoint carries no config"));
    }
    make_run_config(entries.iter().map(|(k, v)| (k.as_str(), v)))
}
