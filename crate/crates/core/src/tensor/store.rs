//! Flat parameter container: path string -> (shape, raw little-endian
//! floats), plus a version tag. Round-trips bit-exactly.

use std::io::{self, Read, Write};

use super::{Scalar, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"LCPS";
pub const STORE_VERSION: u32 = 1;

/// Element type tag carried by serialized containers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
    fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }
    fn from_tag(t: u8) -> Option<Self> {
        match t {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub path: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

/// Ordered collection of named parameter buffers.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub version: u32,
    pub dtype: DType,
    pub entries: Vec<ParamEntry>,
}

fn scalar_to_le<F: Scalar>(v: F) -> Vec<u8> {
    match F::DTYPE {
        DType::F32 => (v.to_f64() as f32).to_le_bytes().to_vec(),
        DType::F64 => v.to_f64().to_le_bytes().to_vec(),
    }
}

fn scalar_from_le<F: Scalar>(bytes: &[u8]) -> F {
    match F::DTYPE {
        DType::F32 => F::from_f64(f32::from_le_bytes(bytes.try_into().unwrap()) as f64),
        DType::F64 => F::from_f64(f64::from_le_bytes(bytes.try_into().unwrap())),
    }
}

impl ParamStore {
    /// Snapshots named tensors into a container.
    pub fn from_named<F: Scalar>(named: &[(String, Tensor<F>)]) -> Self {
        let entries = named
            .iter()
            .map(|(path, t)| {
                let mut bytes = Vec::with_capacity(t.numel() * F::DTYPE.width());
                for &v in t.data().iter() {
                    bytes.extend_from_slice(&scalar_to_le(v));
                }
                ParamEntry {
                    path: path.clone(),
                    shape: t.shape().to_vec(),
                    bytes,
                }
            })
            .collect();
        ParamStore {
            version: STORE_VERSION,
            dtype: F::DTYPE,
            entries,
        }
    }

    /// Writes container values back into matching tensors. Every named
    /// tensor must be present with an identical shape.
    pub fn apply_to<F: Scalar>(&self, named: &[(String, Tensor<F>)]) -> Result<(), TensorError> {
        if self.dtype != F::DTYPE {
            return Err(TensorError::Contract(format!(
                "parameter container dtype {:?} does not match build dtype {:?}",
                self.dtype,
                F::DTYPE
            )));
        }
        for (path, tensor) in named {
            let entry = self
                .entries
                .iter()
                .find(|e| &e.path == path)
                .ok_or_else(|| {
                    TensorError::Contract(format!("missing parameter '{path}' in container"))
                })?;
            if entry.shape != tensor.shape() {
                return Err(TensorError::Contract(format!(
                    "parameter '{path}' shape {:?} != expected {:?}",
                    entry.shape,
                    tensor.shape()
                )));
            }
            let w = self.dtype.width();
            let values: Vec<F> = entry
                .bytes
                .chunks_exact(w)
                .map(scalar_from_le::<F>)
                .collect();
            tensor.set_data(&values);
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&self.version.to_le_bytes())?;
        w.write_all(&[self.dtype.tag()])?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let path = e.path.as_bytes();
            w.write_all(&(path.len() as u16).to_le_bytes())?;
            w.write_all(path)?;
            w.write_all(&[e.shape.len() as u8])?;
            for &d in &e.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&(e.bytes.len() as u64).to_le_bytes())?;
            w.write_all(&e.bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Self> {
        let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a parameter container"));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b)?;
        let version = u32::from_le_bytes(u32b);
        if version != STORE_VERSION {
            return Err(bad(&format!("unsupported container version {version}")));
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        let dtype = DType::from_tag(tag[0]).ok_or_else(|| bad("unknown dtype tag"))?;
        r.read_exact(&mut u32b)?;
        let count = u32::from_le_bytes(u32b) as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let mut u16b = [0u8; 2];
            r.read_exact(&mut u16b)?;
            let mut path = vec![0u8; u16::from_le_bytes(u16b) as usize];
            r.read_exact(&mut path)?;
            let path = String::from_utf8(path).map_err(|_| bad("non-utf8 parameter path"))?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let mut shape = Vec::with_capacity(rank[0] as usize);
            for _ in 0..rank[0] {
                r.read_exact(&mut u32b)?;
                shape.push(u32::from_le_bytes(u32b) as usize);
            }
            let mut u64b = [0u8; 8];
            r.read_exact(&mut u64b)?;
            let len = u64::from_le_bytes(u64b) as usize;
            let numel: usize = shape.iter().product();
            if len != numel * dtype.width() {
                return Err(bad(&format!("entry '{path}' byte length mismatch")));
            }
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes)?;
            entries.push(ParamEntry { path, shape, bytes });
        }
        Ok(ParamStore {
            version,
            dtype,
            entries,
        })
    }
}
