//! The "DST1" tensor container used for checkpoints and datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DST1" | u32 entry count | entries...
//! entry:  u16 name length | UTF-8 name | u8 dtype | u8 rank | rank × u32 dims | payload
//! ```
//!
//! dtype 0 is f32 and 1 is i64. Two extensions exist: 2 holds raw bytes
//! (UTF-8 text such as an embedded config) and 3 holds f64.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DST1";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    I64(Vec<i64>),
    Bytes(Vec<u8>),
    F64(Vec<f64>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::I64(_) => 1,
            Payload::Bytes(_) => 2,
            Payload::F64(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::I64(v) => v.len(),
            Payload::Bytes(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn dtype_name(&self) -> &'static str {
        match self {
            Payload::F32(_) => "f32",
            Payload::I64(_) => "i64",
            Payload::Bytes(_) => "bytes",
            Payload::F64(_) => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub payload: Payload,
}

impl Entry {
    pub fn new(name: impl Into<String>, dims: &[usize], payload: Payload) -> Result<Self> {
        let name = name.into();
        let n: usize = dims.iter().product();
        if n != payload.len() {
            return Err(Error::Dimension(format!(
                "entry {name}: dims {dims:?} need {n} values, payload has {}",
                payload.len()
            )));
        }
        if name.len() > u16::MAX as usize || dims.len() > u8::MAX as usize {
            return Err(Error::Usage(format!("entry {name}: name or rank too long")));
        }
        let dims = dims
            .iter()
            .map(|&d| u32::try_from(d).map_err(|_| Error::Usage(format!("entry {name}: dim {d} too large"))))
            .collect::<Result<_>>()?;
        Ok(Entry { name, dims, payload })
    }

    /// Stores a tensor in its native precision.
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|x| x.to_f32().expect("f32")).collect()),
            DType::F64 => Payload::F64(t.data().iter().map(|x| x.to_f64_lossy()).collect()),
        };
        Entry { name: name.into(), dims: t.shape().iter().map(|&d| d as u32).collect(), payload }
    }

    pub fn text(name: impl Into<String>, text: &str) -> Self {
        let bytes = text.as_bytes().to_vec();
        Entry { name: name.into(), dims: vec![bytes.len() as u32], payload: Payload::Bytes(bytes) }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<Entry>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: Entry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| Error::parse(name, "missing entry"))
    }

    pub fn f32(&self, name: &str) -> Result<(Vec<usize>, &[f32])> {
        match self.require(name)? {
            Entry { payload: Payload::F32(v), .. } => Ok((self.require(name)?.shape(), v)),
            e => Err(Error::parse(name, format!("expected f32, found {}", e.payload.dtype_name()))),
        }
    }

    pub fn i64(&self, name: &str) -> Result<(Vec<usize>, &[i64])> {
        match self.require(name)? {
            Entry { payload: Payload::I64(v), .. } => Ok((self.require(name)?.shape(), v)),
            e => Err(Error::parse(name, format!("expected i64, found {}", e.payload.dtype_name()))),
        }
    }

    /// Reads a float entry into a tensor of any scalar type.
    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.require(name)?;
        let data: Vec<T> = match &e.payload {
            Payload::F32(v) => v.iter().map(|&x| T::from_f32(x).expect("f32 converts")).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::from_f64_lossy(x)).collect(),
            other => return Err(Error::parse(name, format!("expected a float tensor, found {}", other.dtype_name()))),
        };
        let shape = if e.dims.is_empty() { Vec::new() } else { e.shape() };
        if shape.is_empty() {
            return Ok(Tensor::scalar(data[0]));
        }
        Tensor::new(&shape, data).map_err(|err| Error::parse(name, err.to_string()))
    }

    pub fn text(&self, name: &str) -> Result<String> {
        match self.require(name)? {
            Entry { payload: Payload::Bytes(v), .. } => {
                String::from_utf8(v.clone()).map_err(|_| Error::parse(name, "invalid UTF-8"))
            }
            e => Err(Error::parse(name, format!("expected bytes, found {}", e.payload.dtype_name()))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.dtype());
            out.push(e.dims.len() as u8);
            for d in &e.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::Bytes(v) => out.extend_from_slice(v),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::parse("magic", "expected \"DST1\""));
        }
        let count = r.u32("entry count")?;
        let mut entries = Vec::new();
        for i in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::parse(format!("entry {i} name"), "invalid UTF-8"))?
                .to_string();
            let dtype = r.u8("dtype")?;
            let rank = r.u8("rank")? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dims")?);
            }
            let n = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
            let n = n.ok_or_else(|| Error::parse(format!("{name} dims"), "overflow"))?;
            let field = format!("{name} payload");
            let payload = match dtype {
                0 => Payload::F32(
                    r.take(n.saturating_mul(4), &field)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => Payload::I64(
                    r.take(n.saturating_mul(8), &field)?
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => Payload::Bytes(r.take(n, &field)?.to_vec()),
                3 => Payload::F64(
                    r.take(n.saturating_mul(8), &field)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(Error::parse(format!("{name} dtype"), format!("unknown dtype {other}"))),
            };
            entries.push(Entry { name, dims, payload });
        }
        if r.pos != bytes.len() {
            return Err(Error::parse("trailer", format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Container { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::parse(field, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}
