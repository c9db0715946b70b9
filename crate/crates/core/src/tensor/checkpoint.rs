//! `CSR1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        4 bytes  "CSR1"
//! entry_count  u32
//! entry*       repeated entry_count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   dtype      u8   (0 = f32, 1 = f64, 2 = u64, 3 = u8)
//!   ndim       u32
//!   dims       ndim x u64
//!   data       product(dims) elements of dtype, little-endian
//! ```
//!
//! Entries keep their insertion order, so writing the same content twice
//! produces identical bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CSR1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U64 = 2,
    U8 = 3,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::U64,
            3 => DType::U8,
            other => return Err(Error::Checkpoint(format!("unknown dtype code {other}"))),
        })
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::U64 => 8,
            DType::U8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
    U8(Vec<u8>),
}

impl Payload {
    fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
            Payload::U64(_) => DType::U64,
            Payload::U8(_) => DType::U8,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::U64(v) => v.len(),
            Payload::U8(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, payload: Payload) -> Result<()> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != payload.len() {
            return Err(Error::Checkpoint(format!(
                "entry `{name}`: shape {shape:?} does not match {} values",
                payload.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry `{name}`")));
        }
        self.entries.push(Entry {
            name,
            shape,
            payload,
        });
        Ok(())
    }

    pub fn insert_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let data = t.data().iter().map(|v| v.as_f64());
        let payload = match T::DTYPE {
            DType::F64 => Payload::F64(data.collect()),
            _ => Payload::F32(data.map(|v| v as f32).collect()),
        };
        self.insert(name, t.shape().to_vec(), payload)
    }

    pub fn insert_u64(&mut self, name: impl Into<String>, values: Vec<u64>) -> Result<()> {
        let n = values.len();
        self.insert(name, vec![n], Payload::U64(values))
    }

    pub fn insert_bytes(&mut self, name: impl Into<String>, bytes: Vec<u8>) -> Result<()> {
        let n = bytes.len();
        self.insert(name, vec![n], Payload::U8(bytes))
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    fn require(&self, name: &str) -> Result<&Entry> {
        self.get(name).ok_or_else(|| Error::MissingEntry(name.to_string()))
    }

    pub fn tensor_f32(&self, name: &str) -> Result<Tensor<f32>> {
        let e = self.require(name)?;
        match &e.payload {
            Payload::F32(v) => Tensor::new(e.shape.clone(), v.clone()),
            other => Err(Error::Checkpoint(format!(
                "entry `{name}` is {:?}, expected f32",
                other.dtype()
            ))),
        }
    }

    pub fn tensor_f64(&self, name: &str) -> Result<Tensor<f64>> {
        let e = self.require(name)?;
        match &e.payload {
            Payload::F64(v) => Tensor::new(e.shape.clone(), v.clone()),
            other => Err(Error::Checkpoint(format!(
                "entry `{name}` is {:?}, expected f64",
                other.dtype()
            ))),
        }
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.require(name)?.payload {
            Payload::U64(v) => Ok(v),
            other => Err(Error::Checkpoint(format!(
                "entry `{name}` is {:?}, expected u64",
                other.dtype()
            ))),
        }
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.require(name)?.payload {
            Payload::U8(v) => Ok(v),
            other => Err(Error::Checkpoint(format!(
                "entry `{name}` is {:?}, expected u8",
                other.dtype()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.payload.dtype() as u8);
            out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => out.extend_from_slice(v),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic, expected CSR1".into()));
        }
        let count = read_u32(&mut r)?;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len.min(r.len())];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
            let mut code = [0u8; 1];
            read_exact(&mut r, &mut code)?;
            let dtype = DType::from_code(code[0])?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, d| acc.checked_mul(*d))
                .filter(|n| n.checked_mul(dtype.width()).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| Error::Checkpoint(format!("entry `{name}` is truncated")))?;
            let (raw, rest) = r.split_at(numel * dtype.width());
            r = rest;
            let payload = match dtype {
                DType::F32 => Payload::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::F64 => Payload::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::U64 => Payload::U64(
                    raw.chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                DType::U8 => Payload::U8(raw.to_vec()),
            };
            ckpt.insert(name, shape, payload)?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.len())));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut c = Checkpoint::new();
        let t = Tensor::<f32>::from_fn(&[2, 3], |i| (i as f32 * 0.1).sin());
        c.insert_tensor("w", &t).unwrap();
        c.insert_tensor("d", &Tensor::<f64>::full(&[1], std::f64::consts::PI)).unwrap();
        c.insert_u64("iter", vec![42]).unwrap();
        c.insert_bytes("rng", vec![1, 2, 3]).unwrap();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], b"CSR1");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.tensor_f32("w").unwrap(), t);
        assert_eq!(back.u64s("iter").unwrap(), &[42]);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let mut c = Checkpoint::new();
        c.insert_tensor("w", &Tensor::<f32>::zeros(&[4])).unwrap();
        let bytes = c.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        assert!(c.insert_tensor("w", &Tensor::<f32>::zeros(&[1])).is_err());
        assert!(matches!(c.tensor_f32("missing"), Err(Error::MissingEntry(_))));
    }
}
