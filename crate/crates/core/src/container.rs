//! FCWT tensor container (little-endian).
//!
//! ```text
//! "FCWT"  u16 version (=1)  u16 tensor_count
//! per tensor:
//!     u16 name_len  name (UTF-8)  u8 dtype (0 = f32, 1 = f64)  u8 rank
//!     u32 dims[rank]  row-major payload
//! u32 header_len  header (UTF-8 JSON document)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"FCWT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Values widened to f64; f32 payloads round-trip exactly.
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        NamedTensor {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            values: t.to_f64_vec(),
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64(&self.shape, &self.values)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub tensors: Vec<NamedTensor>,
    pub header: String,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::Container(format!("missing tensor '{name}'")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let count = u16::try_from(self.tensors.len())
            .map_err(|_| Error::Container("more than 65535 tensors".into()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Container(format!("tensor name too long: {}", t.name)))?;
            let rank = u8::try_from(t.shape.len())
                .map_err(|_| Error::Container(format!("rank too large: {}", t.name)))?;
            if t.shape.iter().product::<usize>() != t.values.len() {
                return Err(Error::Container(format!(
                    "tensor '{}' has {} values for shape {:?}",
                    t.name,
                    t.values.len(),
                    t.shape
                )));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.dtype.code());
            out.push(rank);
            for &d in &t.shape {
                let d = u32::try_from(d)
                    .map_err(|_| Error::Container(format!("dimension too large: {}", t.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in &t.values {
                match t.dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let header = self.header.as_bytes();
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Container("header too long".into()))?;
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(header);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::Container(format!("bad magic {magic:?}, expected \"FCWT\"")));
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::Container(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let count = r.u16("tensor count")?;
        let mut tensors = Vec::with_capacity(count as usize);
        for index in 0..count {
            let what = format!("name length of tensor #{index}");
            let name_len = r.u16(&what)? as usize;
            let name_bytes = r.take(name_len, &format!("name of tensor #{index}"))?;
            let name = std::str::from_utf8(name_bytes)
                .map_err(|_| Error::Container(format!("tensor #{index} name is not UTF-8")))?
                .to_string();
            let code = r.u8(&format!("dtype of tensor '{name}'"))?;
            let dtype = DType::from_code(code).ok_or_else(|| {
                Error::Container(format!("tensor '{name}' has unknown dtype code {code}"))
            })?;
            let rank = r.u8(&format!("rank of tensor '{name}'"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32(&format!("dims of tensor '{name}'"))? as usize);
            }
            let count: usize = shape.iter().product();
            let payload = r.take(count * dtype.size(), &format!("payload of tensor '{name}'"))?;
            let values = match dtype {
                DType::F32 => payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            if tensors.iter().any(|t: &NamedTensor| t.name == name) {
                return Err(Error::Container(format!("duplicate tensor '{name}'")));
            }
            tensors.push(NamedTensor {
                name,
                dtype,
                shape,
                values,
            });
        }
        let header_len = r.u32("header length")? as usize;
        let header = std::str::from_utf8(r.take(header_len, "header")?)
            .map_err(|_| Error::Container("header is not UTF-8".into()))?
            .to_string();
        if r.pos != bytes.len() {
            return Err(Error::Container(format!(
                "{} trailing bytes at offset {}",
                bytes.len() - r.pos,
                r.pos
            )));
        }
        Ok(Container { tensors, header })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Container(format!(
                "truncated {what} at offset {}: need {n} bytes, {} left",
                self.pos,
                self.bytes.len() - self.pos
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}
