//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! | field        | encoding                                         |
//! |--------------|--------------------------------------------------|
//! | magic        | `MLTR`                                           |
//! | version      | u32                                              |
//! | config       | u64 length, UTF-8 JSON                           |
//! | step         | u64 optimizer step count                         |
//! | tensor count | u32                                              |
//! | tensor       | u32 name length, UTF-8 name, u8 dtype (0 = f32, 1 = f64), u32 rank, u64 per dim, raw little-endian payload |
//! | checksum     | u32 CRC-32 of every preceding byte               |

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MLTR";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub payload: Vec<u8>,
}

impl RawTensor {
    pub fn from_tensor<F: Real>(name: impl Into<String>, t: &Tensor<F>) -> Self {
        Self::from_slice(name, t.shape(), t.data())
    }

    pub fn from_slice<F: Real>(name: impl Into<String>, shape: &[usize], data: &[F]) -> Self {
        let mut payload = Vec::with_capacity(data.len() * F::DTYPE.size());
        for &v in data {
            v.write_le(&mut payload);
        }
        Self { name: name.into(), dtype: F::DTYPE, shape: shape.to_vec(), payload }
    }

    pub fn to_tensor<F: Real>(&self) -> Result<Tensor<F>> {
        if self.dtype != F::DTYPE {
            return Err(Error::Mismatch(vec![format!(
                "{}: dtype {:?}, expected {:?}",
                self.name,
                self.dtype,
                F::DTYPE
            )]));
        }
        let data = self.payload.chunks_exact(F::DTYPE.size()).map(F::read_le).collect();
        Tensor::new(self.shape.clone(), data)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub config_json: String,
    pub step: u64,
    pub tensors: Vec<RawTensor>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.dtype.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&t.payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Verifies the checksum before interpreting anything beyond the
    /// magic and version, so a damaged file never yields a partial result.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint (bad magic or too short)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Corrupt(format!(
                "unsupported checkpoint version {version}; this build reads {VERSION}"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(Error::Corrupt("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let config_len = r.u64()? as usize;
        let config_json = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::Corrupt("config is not UTF-8".into()))?;
        let step = r.u64()?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| Error::Corrupt(format!("{name}: unknown dtype {tag}")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(dtype.size()))
                .ok_or_else(|| Error::Corrupt(format!("{name}: shape overflows")))?;
            let payload = r.take(numel)?.to_vec();
            tensors.push(RawTensor { name, dtype, shape, payload });
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { config_json, step, tensors })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Corrupt(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Every parameter of `store`, in store order.
pub fn store_tensors<F: Real>(store: &ParamStore<F>) -> Vec<RawTensor> {
    store.iter().map(|(_, p)| RawTensor::from_tensor(p.name.clone(), &p.value)).collect()
}

/// Copies the parameters whose names satisfy `select` from `tensors` into
/// `store`. Nothing is written unless every selected parameter is present
/// with matching dtype and shape and, when `exact` is set, no tensor
/// matching `select` is left unused.
pub fn load_into<F: Real>(
    store: &mut ParamStore<F>,
    tensors: &[RawTensor],
    select: impl Fn(&str) -> bool,
    exact: bool,
) -> Result<()> {
    let mut problems = Vec::new();
    let mut updates = Vec::new();
    for (id, p) in store.iter().filter(|(_, p)| select(&p.name)) {
        match tensors.iter().find(|t| t.name == p.name) {
            None => problems.push(format!("{}: missing (expected shape {:?})", p.name, p.value.shape())),
            Some(t) if t.shape != p.value.shape() || t.dtype != F::DTYPE => problems.push(format!(
                "{}: {:?} {:?} in checkpoint, model has {:?} {:?}",
                p.name,
                t.dtype,
                t.shape,
                F::DTYPE,
                p.value.shape()
            )),
            Some(t) => updates.push((id, t.to_tensor::<F>()?)),
        }
    }
    if exact {
        for t in tensors.iter().filter(|t| select(&t.name)) {
            if store.find(&t.name).is_none() {
                problems.push(format!("{}: not in model", t.name));
            }
        }
    }
    if !problems.is_empty() {
        return Err(Error::Mismatch(problems));
    }
    for (id, value) in updates {
        store.get_mut(id).value = value;
    }
    Ok(())
}
