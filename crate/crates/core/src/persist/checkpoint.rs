use std::path::Path;

use crate::candidates::TensorSource;
use crate::error::{NtaaError, Result};
use crate::tensor::{DType, Element, ParamStore, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NTAA";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A tensor of either precision.
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

    pub fn cast<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    fn write_data(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

/// Named tensors plus a small header. Layout (all integers little-endian):
///
/// ```text
/// "NTAA" | version u32 | phase (u32 len, bytes) | seed u64
/// | meta count u32 | (key, value) strings
/// | tensor count u32 | per tensor: name (u32 len, bytes), dtype u8, rank u32, extents u64.., data
/// | crc32 of every preceding byte
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub phase: String,
    pub seed: u64,
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<(String, AnyTensor)>,
}

impl Checkpoint {
    pub fn new(phase: impl Into<String>, seed: u64) -> Self {
        Checkpoint { phase: phase.into(), seed, meta: Vec::new(), tensors: Vec::new() }
    }

    /// Every parameter and buffer of `store`, in registration order.
    pub fn from_store<T: Element>(
        store: &ParamStore<T>,
        phase: impl Into<String>,
        seed: u64,
    ) -> Self {
        let mut c = Checkpoint::new(phase, seed);
        c.tensors = store
            .iter()
            .map(|(_, p)| (p.name.clone(), AnyTensor::from_tensor(&p.tensor)))
            .collect();
        c
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.push((key.into(), value.into()));
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut names: Vec<&str> = self.tensors.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(NtaaError::checkpoint(format!("duplicate tensor name {}", w[0])));
        }
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_str(&mut out, &self.phase);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.push(t.dtype().code());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            t.write_data(&mut out);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(NtaaError::checkpoint(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(NtaaError::checkpoint("bad magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(NtaaError::checkpoint(format!(
                "unsupported version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(body);
        if stored != actual {
            return Err(NtaaError::checkpoint(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        let mut r = Reader { bytes: body, pos: 8 };
        let phase = r.string()?;
        let seed = r.u64()?;
        let mut meta = Vec::new();
        for _ in 0..r.u32()? {
            meta.push((r.string()?, r.string()?));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let at = r.pos;
            let dtype = DType::from_code(r.u8()?).ok_or_else(|| r.err(at, "unknown dtype code"))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| r.err(at, "extent overflow"))?);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .ok_or_else(|| r.err(at, "size overflow"))?;
            let raw =
                r.take(n.checked_mul(dtype.size()).ok_or_else(|| r.err(at, "size overflow"))?)?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(
                    &shape,
                    raw.chunks_exact(4).map(f32::read_le).collect(),
                )?),
                DType::F64 => AnyTensor::F64(Tensor::new(
                    &shape,
                    raw.chunks_exact(8).map(f64::read_le).collect(),
                )?),
            };
            tensors.push((name, t));
        }
        if r.pos != body.len() {
            return Err(r.err(r.pos, "trailing bytes after tensor table"));
        }
        Ok(Checkpoint { phase, seed, meta, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

impl<T: Element> TensorSource<T> for Checkpoint {
    fn fetch(&self, name: &str) -> Option<Tensor<T>> {
        self.get(name).map(AnyTensor::cast)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, reason: &str) -> NtaaError {
        NtaaError::Format { offset: offset as u64, reason: reason.to_string() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| self.err(self.pos, "unexpected end of data"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.pos;
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err(at, "string is not UTF-8"))
    }
}
