//! Binary tensor (`TNSR`) and checkpoint (`MFAC`) containers.
//!
//! Tensor: `"TNSR"`, u32 version 1, u8 dtype (1 = f32, 2 = f64), u8 ndim
//! (always 4), four u64 dims, then the row-major payload.
//!
//! Checkpoint: `"MFAC"`, u32 version 1, u32 record count, then records of
//! (u32 name length, UTF-8 name, payload), then a u64 wrapping sum of
//! every preceding byte. The first record is `__config`, whose payload
//! is a u32 length followed by `key=value` text; every other payload is
//! an embedded tensor. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const TENSOR_MAGIC: &[u8; 4] = b"TNSR";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MFAC";
pub const VERSION: u32 = 1;
pub const CONFIG_RECORD: &str = "__config";

/// A decoded tensor of either element type.
#[derive(Debug, Clone, PartialEq)]
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

    pub fn shape(&self) -> [usize; 4] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`; exact when the stored dtype is `T`.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor_into<T: Scalar>(tensor: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(T::DTYPE as u8);
    out.push(4);
    for d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(tensor.len() * T::DTYPE.size());
    for &v in tensor.data() {
        v.to_le_bytes_into(out);
    }
}

pub fn encode_tensor<T: Scalar>(tensor: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_tensor_into(tensor, &mut out);
    out
}

/// Little-endian reader over a byte slice that reports what it was
/// reading when it runs out.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize, record: &str, what: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(
                record,
                format!("truncated while reading {what} (need {n} bytes, {} left)", self.remaining()),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self, record: &str, what: &str) -> Result<u8> {
        Ok(self.take(1, record, what)?[0])
    }

    pub(crate) fn u32(&mut self, record: &str, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, record, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, record: &str, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, record, what)?.try_into().unwrap()))
    }
}

fn read_payload<T: Scalar>(r: &mut Reader<'_>, shape: [usize; 4], count: usize, record: &str) -> Result<Tensor<T>> {
    let width = T::DTYPE.size();
    let bytes = r.take(count * width, record, "tensor payload")?;
    let data = bytes.chunks_exact(width).map(T::from_le_slice).collect();
    Tensor::new(shape, data)
}

fn read_tensor(r: &mut Reader<'_>, record: &str) -> Result<AnyTensor> {
    let magic = r.take(4, record, "tensor magic")?;
    if magic != TENSOR_MAGIC {
        return Err(Error::format(record, format!("bad tensor magic {magic:?}")));
    }
    let version = r.u32(record, "tensor version")?;
    if version != VERSION {
        return Err(Error::format(record, format!("unsupported tensor version {version}")));
    }
    let tag = r.u8(record, "dtype")?;
    let dtype = DType::from_tag(tag)
        .ok_or_else(|| Error::format(record, format!("unknown dtype tag {tag}")))?;
    let ndim = r.u8(record, "ndim")?;
    if ndim != 4 {
        return Err(Error::format(record, format!("ndim must be 4, got {ndim}")));
    }
    let mut shape = [0usize; 4];
    for d in &mut shape {
        let raw = r.u64(record, "dims")?;
        *d = usize::try_from(raw).map_err(|_| Error::format(record, "dimension overflows usize"))?;
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(dtype.size()).is_some_and(|b| b <= r.remaining()))
        .ok_or_else(|| {
            Error::format(record, format!("payload for shape {shape:?} exceeds available bytes"))
        })?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(read_payload(r, shape, count, record)?),
        DType::F64 => AnyTensor::F64(read_payload(r, shape, count, record)?),
    })
}

/// Decodes one tensor; trailing bytes are an error.
pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    let mut r = Reader::new(bytes);
    let t = read_tensor(&mut r, "tensor")?;
    if r.remaining() != 0 {
        return Err(Error::format("tensor", format!("{} trailing bytes", r.remaining())));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// `key=value` text of the `__config` record.
    pub config: String,
    pub tensors: Vec<(String, AnyTensor)>,
}

fn checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

fn push_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

pub fn encode_checkpoint<'a, T: Scalar>(
    config: &str,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<T>)>,
) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32 + 1).to_le_bytes());
    push_name(&mut out, CONFIG_RECORD);
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    for (name, tensor) in tensors {
        push_name(&mut out, name);
        encode_tensor_into(tensor, &mut out);
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let header = "checkpoint header";
    if bytes.len() < 8 {
        return Err(Error::format(header, "file too short"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader::new(body);
    let magic = r.take(4, header, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(header, format!("bad magic {magic:?}")));
    }
    let version = r.u32(header, "version")?;
    if version != VERSION {
        return Err(Error::format(header, format!("unsupported version {version}")));
    }
    let count = r.u32(header, "record count")? as usize;
    if count == 0 {
        return Err(Error::format(header, format!("missing {CONFIG_RECORD} record")));
    }
    let mut config = None;
    let mut tensors = Vec::new();
    for index in 0..count {
        let label = format!("record {index}");
        let len = r.u32(&label, "name length")? as usize;
        let name = std::str::from_utf8(r.take(len, &label, "name")?)
            .map_err(|_| Error::format(&label, "name is not UTF-8"))?
            .to_string();
        if index == 0 {
            if name != CONFIG_RECORD {
                return Err(Error::format(&name, format!("first record must be {CONFIG_RECORD}")));
            }
            let text_len = r.u32(&name, "config length")? as usize;
            let text = std::str::from_utf8(r.take(text_len, &name, "config text")?)
                .map_err(|_| Error::format(&name, "config is not UTF-8"))?;
            config = Some(text.to_string());
            continue;
        }
        if name == CONFIG_RECORD || tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::format(&name, "duplicate record name"));
        }
        let tensor = read_tensor(&mut r, &name)?;
        tensors.push((name, tensor));
    }
    if r.remaining() != 0 {
        return Err(Error::format("checkpoint trailer", format!("{} unexpected bytes", r.remaining())));
    }
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let actual = checksum(body);
    if stored != actual {
        return Err(Error::format(
            "checkpoint trailer",
            format!("checksum mismatch (stored {stored}, computed {actual})"),
        ));
    }
    Ok(Checkpoint {
        config: config.expect("record 0 is the config"),
        tensors,
    })
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Invalid(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", file_name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}
