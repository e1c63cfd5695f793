//! Binary tensor container used for checkpoints and feature dumps.
//!
//! Layout, all integers little-endian:
//! `"FLXA"`, u32 version, u32 tensor count, then per tensor u16 name length,
//! UTF-8 name, u8 dtype tag, u8 rank, u32 per dimension, raw payload; finally
//! a u32 length and a UTF-8 `key=value` text block.

use std::fs;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"FLXA";
pub const FORMAT_VERSION: u32 = 1;

/// A tensor as stored on disk; values are widened to f64 losslessly.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTensor {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl RawTensor {
    pub fn from_tensor<T: Scalar>(name: &str, t: &Tensor<T>) -> Self {
        Self {
            name: name.to_string(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            values: t.to_f64_vec(),
        }
    }

    /// Convert to `T`; exact when the stored dtype is `T` or narrower.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(&self.shape, self.values.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    fn payload_len(&self) -> usize {
        self.values.len() * self.dtype.size_of()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorFile {
    pub tensors: Vec<RawTensor>,
    /// Trailing text block (model configuration for checkpoints).
    pub text: String,
}

impl TensorFile {
    /// Exact encoded size: fixed header, per-tensor headers, payloads, text.
    pub fn encoded_len(&self) -> usize {
        let per: usize = self.tensors.iter().map(|t| 2 + t.name.len() + 2 + 4 * t.shape.len() + t.payload_len()).sum();
        4 + 4 + 4 + per + 4 + self.text.len()
    }

    pub fn get(&self, name: &str) -> Option<&RawTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn encode_checkpoint(file: &TensorFile) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(file.encoded_len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let count = u32::try_from(file.tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for t in &file.tensors {
        let name_len = u16::try_from(t.name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {}", t.name)))?;
        let rank = u8::try_from(t.shape.len()).map_err(|_| Error::Checkpoint(format!("{}: rank too large", t.name)))?;
        if t.shape.iter().product::<usize>() != t.values.len() {
            return Err(Error::Checkpoint(format!("{}: shape {:?} does not match {} values", t.name, t.shape, t.values.len())));
        }
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(t.dtype.tag());
        out.push(rank);
        for &d in &t.shape {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("{}: dimension too large", t.name)))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match t.dtype {
            DType::F32 => t.values.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            DType::F64 => t.values.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let text_len = u32::try_from(file.text.len()).map_err(|_| Error::Checkpoint("text block too large".into()))?;
    out.extend_from_slice(&text_len.to_le_bytes());
    out.extend_from_slice(file.text.as_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, {} left",
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn utf8(&mut self, n: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TensorFile> {
    if bytes.len() < 4 {
        return if MAGIC.starts_with(bytes) {
            Err(Error::Truncated("magic".into()))
        } else {
            Err(Error::BadMagic)
        };
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { bytes, pos: 4 };
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = r.utf8(name_len, "tensor name")?;
        let tag = r.u8("dtype")?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Checkpoint(format!("tensor {i} ({name}): unknown dtype tag {tag}")))?;
        let rank = r.u8("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dimension").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * dtype.size_of(), &format!("payload of {name}"))?;
        let values = match dtype {
            DType::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
        };
        tensors.push(RawTensor { name, dtype, shape, values });
    }
    let text_len = r.u32("text length")? as usize;
    let text = r.utf8(text_len, "text block")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", bytes.len() - r.pos)));
    }
    Ok(TensorFile { tensors, text })
}

pub fn write_tensor_file(path: impl AsRef<Path>, file: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(file)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

impl<T: Scalar> Model<T> {
    /// Every stored tensor (weights and running statistics) plus the config.
    pub fn to_tensor_file(&self) -> TensorFile {
        TensorFile {
            tensors: self.store.entries().iter().map(|e| RawTensor::from_tensor(&e.name, &e.value)).collect(),
            text: self.cfg.to_kv(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        encode_checkpoint(&self.to_tensor_file())
    }

    /// Rebuild from a checkpoint. Tensors stored in another precision are
    /// converted to `T`.
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let cfg = ModelConfig::from_kv(&file.text)?;
        let mut m = Self::build(&cfg)?;
        if file.tensors.len() != m.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, the configured model has {}",
                file.tensors.len(),
                m.store.len()
            )));
        }
        for raw in &file.tensors {
            let id = m
                .store
                .id_of(&raw.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", raw.name)))?;
            let want = m.store.get(id).shape().to_vec();
            if raw.shape != want {
                return Err(Error::Checkpoint(format!("{}: stored shape {:?}, model expects {want:?}", raw.name, raw.shape)));
            }
            m.store.set(id, raw.to_tensor()?)?;
        }
        Ok(m)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_tensor_file(&decode_checkpoint(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor_file(path, &self.to_tensor_file())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&read_tensor_file(path)?)
    }
}
