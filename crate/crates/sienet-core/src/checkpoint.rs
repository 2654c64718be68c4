//! Named-tensor container used for checkpoints and loadable feature
//! extractor weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    4 bytes  "SIEN"
//! version  u32
//! meta_len u64, then meta_len bytes of UTF-8 `key=value` lines
//! count    u64
//! records  count times:
//!   name_len u32, name bytes
//!   dtype    u8 (0 = f32, 1 = f64)
//!   shape    4 x u64 (batch, channels, height, width)
//!   data_len u64, raw little-endian element data
//! ```
//!
//! Write -> read -> write is byte-identical: records and meta lines keep
//! their order.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::shape::Shape;
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SIEN";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default)]
pub struct Container<T> {
    /// Ordered `key=value` metadata (the echoed config lives here).
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Container<T> {
    pub fn new() -> Self {
        Container { meta: Vec::new(), tensors: Vec::new() }
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut meta_text = String::new();
        for (k, v) in &self.meta {
            meta_text.push_str(k);
            meta_text.push('=');
            meta_text.push_str(v);
            meta_text.push('\n');
        }
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta_text.len() as u64).to_le_bytes());
        out.extend_from_slice(meta_text.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, tensor) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(T::DTYPE.code());
            let s = tensor.shape();
            for dim in [s.b, s.c, s.h, s.w] {
                out.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            let data_len = tensor.numel() * T::DTYPE.size();
            out.extend_from_slice(&(data_len as u64).to_le_bytes());
            for &v in tensor.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion { found: version, expected: FORMAT_VERSION });
        }
        let meta_len = r.take_u64()? as usize;
        let meta_text = std::str::from_utf8(r.take(meta_len)?)
            .map_err(|_| Error::Checkpoint("metadata is not UTF-8".into()))?;
        let mut meta = Vec::new();
        for line in meta_text.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad metadata line `{line}`")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        let count = r.take_u64()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = u32::from_le_bytes(r.take(4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let code = r.take(1)?[0];
            let dtype = Dtype::from_code(code)
                .ok_or_else(|| Error::Checkpoint(format!("unknown dtype code {code}")))?;
            if dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has dtype {dtype:?}, expected {:?}",
                    T::DTYPE
                )));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.take_u64()? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let data_len = r.take_u64()? as usize;
            if data_len != shape.numel() * dtype.size() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}`: data length {data_len} does not match shape {shape}"
                )));
            }
            let raw = r.take(data_len)?;
            let data: Vec<T> = raw.chunks_exact(dtype.size()).map(T::read_le).collect();
            tensors.push((name, Tensor::from_vec(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after last record".into()));
        }
        Ok(Container { meta, tensors })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// FNV-1a over the canonical config text; stored in checkpoints so a resume
/// against a different config is caught.
pub fn fnv1a(text: &str) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for byte in text.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}
