//! Binary checkpoint container.
//!
//! All integers are little-endian. Layout:
//!
//! ```text
//! magic        8 bytes  "HCTXCKPT"
//! version      u32      currently 1
//! meta_count   u32
//!   key        u32 length + UTF-8 bytes
//!   value      u32 length + UTF-8 bytes
//! tensor_count u32
//!   name       u32 length + UTF-8 bytes
//!   kind       u8       0 weights, 1 class surrogates, 2 patch surrogates, 3 buffer
//!   rows       u32
//!   cols       u32
//!   data       rows * cols f64, row-major
//! ```
//!
//! Nothing follows the last tensor. Entry order is preserved, so decoding and
//! re-encoding yields identical bytes.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 8] = b"HCTXCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Upper bound on the elements of one tensor accepted when decoding.
const MAX_TENSOR_ELEMS: u64 = 1 << 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Weights,
    ClassSurrogates,
    PatchSurrogates,
    Buffer,
}

impl TensorKind {
    fn code(self) -> u8 {
        match self {
            TensorKind::Weights => 0,
            TensorKind::ClassSurrogates => 1,
            TensorKind::PatchSurrogates => 2,
            TensorKind::Buffer => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => TensorKind::Weights,
            1 => TensorKind::ClassSurrogates,
            2 => TensorKind::PatchSurrogates,
            3 => TensorKind::Buffer,
            _ => return None,
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TensorKind::Weights => "weights",
            TensorKind::ClassSurrogates => "class-surrogates",
            TensorKind::PatchSurrogates => "patch-surrogates",
            TensorKind::Buffer => "buffer",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub kind: TensorKind,
    pub data: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: Vec<(String, String)>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let put_str = |out: &mut Vec<u8>, s: &str| {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        };
        out.extend_from_slice(&(self.metadata.len() as u32).to_le_bytes());
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            put_str(&mut out, &t.name);
            out.push(t.kind.code());
            out.extend_from_slice(&(t.data.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.data.cols() as u32).to_le_bytes());
            for v in t.data.as_slice() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let meta_count = r.u32()?;
        let mut metadata = Vec::new();
        for _ in 0..meta_count {
            metadata.push((r.string()?, r.string()?));
        }
        let tensor_count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..tensor_count {
            let name = r.string()?;
            let code = r.u8()?;
            let kind = TensorKind::from_code(code).ok_or_else(|| bad(format!("tensor {name}: unknown kind {code}")))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let elems = rows as u64 * cols as u64;
            if elems > MAX_TENSOR_ELEMS || elems * 8 > r.remaining() as u64 {
                return Err(bad(format!("tensor {name}: {rows}x{cols} exceeds the remaining data")));
            }
            let raw = r.take(rows * cols * 8)?;
            let values: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint tensor {name}")));
            }
            let data = Matrix::from_vec(rows, cols, values)?;
            tensors.push(TensorRecord { name, kind, data });
        }
        if r.remaining() != 0 {
            return Err(bad(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Checkpoint { metadata, tensors })
    }

    /// Writes atomically: the bytes go to a sibling temporary file that is
    /// then renamed over `path`.
    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Human-readable listing: metadata, then one line per tensor.
    pub fn describe(&self) -> String {
        let mut out = format!("format {FORMAT_VERSION}\n");
        for (k, v) in &self.metadata {
            out.push_str(&format!("meta {k} = {v}\n"));
        }
        for t in &self.tensors {
            out.push_str(&format!(
                "tensor {} {} {}x{}\n",
                t.name,
                t.kind.as_str(),
                t.data.rows(),
                t.data.cols()
            ));
        }
        out
    }
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(bad("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| bad("string is not UTF-8"))
    }
}
