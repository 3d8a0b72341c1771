//! Named tensor archive.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MTTN" | version u32 | count u32 |
//!   per tensor: name_len u32 | name utf-8 | rank u32 | extents u32 × rank |
//!               dtype u8 (0 = f32, 1 = f64) | payload
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{DType, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MTTN";
pub const VERSION: u32 = 1;

/// A tensor of either dtype, as stored in an archive.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// The tensor converted to `T`; exact when the stored dtype is `T`.
    pub fn to<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub trait IntoAny {
    fn into_any(self) -> AnyTensor;
}

impl IntoAny for Tensor<f32> {
    fn into_any(self) -> AnyTensor {
        AnyTensor::F32(self)
    }
}

impl IntoAny for Tensor<f64> {
    fn into_any(self) -> AnyTensor {
        AnyTensor::F64(self)
    }
}

/// Ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<(String, AnyTensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let any = match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        };
        self.entries.push((name.into(), any));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(t.dtype().tag());
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let count = r.u32("tensor count")? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for i in 0..count {
            let name_len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Format(format!("tensor {i}: name is not UTF-8")))?
                .to_string();
            let rank = r.u32("rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("extent").map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let tag = r.take(1, "dtype")?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| Error::Format(format!("tensor '{name}': unknown dtype tag {tag}")))?;
            let payload = r.take(n * dtype.size(), "payload")?;
            let wrap = |e: Error| Error::Format(format!("tensor '{name}': {e}"));
            let t = match dtype {
                DType::F32 => AnyTensor::F32(
                    Tensor::new(&shape, payload.chunks_exact(4).map(f32::read_le).collect()).map_err(wrap)?,
                ),
                DType::F64 => AnyTensor::F64(
                    Tensor::new(&shape, payload.chunks_exact(8).map(f64::read_le).collect()).map_err(wrap)?,
                ),
            };
            entries.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
