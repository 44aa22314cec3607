//! `.ksp` tensor files.
//!
//! Layout, all little-endian: the magic `KSP1`, a `u32` rank, `rank` × `u64`
//! dimensions, a `u8` dtype code (0 = f32, 1 = f64) and the row-major payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::Error;
use crate::{Real, Result};

pub const MAGIC: &[u8; 4] = b"KSP1";
/// Refuse to allocate more than this many elements from a header.
pub const MAX_ELEMENTS: usize = 1 << 31;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    F64 = 1,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum KspTensor {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl KspTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            KspTensor::F32(a) => a.shape(),
            KspTensor::F64(a) => a.shape(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            KspTensor::F32(_) => Dtype::F32,
            KspTensor::F64(_) => Dtype::F64,
        }
    }

    /// Converts to `T`, rounding if needed.
    pub fn into_real<T: Real>(self) -> ArrayD<T> {
        match self {
            KspTensor::F32(a) => a.mapv(|v| T::lit(f64::from(v))),
            KspTensor::F64(a) => a.mapv(T::lit),
        }
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn write_to<W: Write>(mut w: W, tensor: &KspTensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    let shape = tensor.shape();
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&[tensor.dtype() as u8])?;
    match tensor {
        KspTensor::F32(a) => a.iter().try_for_each(|v| w.write_all(&v.to_le_bytes()))?,
        KspTensor::F64(a) => a.iter().try_for_each(|v| w.write_all(&v.to_le_bytes()))?,
    }
    w.flush()
}

pub fn write(path: &Path, tensor: &KspTensor) -> Result<()> {
    write_to(BufWriter::new(File::create(path)?), tensor)?;
    Ok(())
}

/// Stores a tensor as f32 (the on-disk default for parameters and images).
pub fn write_f32<T: Real>(path: &Path, a: &ArrayD<T>) -> Result<()> {
    write(path, &KspTensor::F32(a.mapv(|v| v.as_f64() as f32)))
}

pub fn read_from<R: Read>(mut r: R, path: &Path) -> Result<KspTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| format_err(path, "truncated header"))?;
    if &magic != MAGIC {
        return Err(format_err(path, "bad magic, not a KSP1 file"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(|_| format_err(path, "truncated header"))?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(format_err(path, format!("implausible rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        r.read_exact(&mut b8).map_err(|_| format_err(path, "truncated header"))?;
        dims.push(usize::try_from(u64::from_le_bytes(b8)).map_err(|_| format_err(path, "dimension overflow"))?);
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&c| c <= MAX_ELEMENTS)
        .ok_or_else(|| format_err(path, format!("tensor {dims:?} is too large")))?;
    let mut code = [0u8; 1];
    r.read_exact(&mut code).map_err(|_| format_err(path, "truncated header"))?;
    let dtype = match code[0] {
        0 => Dtype::F32,
        1 => Dtype::F64,
        c => return Err(format_err(path, format!("unknown dtype code {c}"))),
    };
    let mut payload = vec![0u8; count * dtype.size()];
    r.read_exact(&mut payload)
        .map_err(|_| format_err(path, format!("payload shorter than {count} elements")))?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(format_err(path, "trailing bytes after payload"));
    }
    let shape = IxDyn(&dims);
    let tensor = match dtype {
        Dtype::F32 => {
            let v = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            KspTensor::F32(ArrayD::from_shape_vec(shape, v).expect("count matches dims"))
        }
        Dtype::F64 => {
            let v = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            KspTensor::F64(ArrayD::from_shape_vec(shape, v).expect("count matches dims"))
        }
    };
    Ok(tensor)
}

pub fn read(path: &Path) -> Result<KspTensor> {
    let f = File::open(path)?;
    read_from(BufReader::new(f), path)
}
