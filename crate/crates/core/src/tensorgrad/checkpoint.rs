//! Binary weight checkpoints.
//!
//! Layout (little-endian): magic `DPW2`, `u32` version, `u32` parameter
//! count; then per parameter: `u16` name length, name bytes (UTF-8), `u8`
//! rank, `u32` per-axis dims, then the values as `f32`. Values are stored at
//! f32 regardless of the in-memory scalar width.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tape::Params;
use super::tensor::Tensor;
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DPW2";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"DPW2\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("parameter name is not valid UTF-8")]
    BadName,
    #[error("file ends mid-record")]
    Truncated,
    #[error("checkpoint has no parameter named {0:?}")]
    MissingParam(String),
    #[error("checkpoint parameter {name:?} not present in the model")]
    UnknownParam { name: String },
    #[error("parameter {name:?}: checkpoint shape {got:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Write all parameters to `path`.
pub fn save<S: Scalar>(params: &Params<S>, path: &Path) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, tensor) in params.iter() {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[tensor.rank() as u8])?;
        for d in tensor.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in tensor.data() {
            w.write_all(&v.cast_f32().to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read every parameter record from `path`.
pub fn load<S: Scalar>(path: &Path) -> Result<Vec<(String, Tensor<S>)>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| CheckpointError::BadName)?;
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 4];
        for _ in 0..n {
            read_exact(&mut r, &mut buf)?;
            data.push(S::cast_from(f32::from_le_bytes(buf) as f64));
        }
        entries.push((
            name,
            Tensor::from_vec(&shape, data).expect("length derived from shape"),
        ));
    }
    Ok(entries)
}

/// Load `path` into an existing parameter store, matching by name.
///
/// Every model parameter must be present in the checkpoint and vice versa;
/// shapes must agree exactly.
pub fn restore<S: Scalar>(params: &mut Params<S>, path: &Path) -> Result<(), CheckpointError> {
    let entries = load::<S>(path)?;
    for (name, tensor) in &entries {
        let Some(id) = params.find(name) else {
            return Err(CheckpointError::UnknownParam { name: name.clone() });
        };
        if params.value(id).shape() != tensor.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                expected: params.value(id).shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
    }
    for id in params.ids().collect::<Vec<_>>() {
        let name = params.name(id).to_string();
        if !entries.iter().any(|(n, _)| *n == name) {
            return Err(CheckpointError::MissingParam(name));
        }
    }
    for (name, tensor) in entries {
        let id = params.find(&name).expect("validated above");
        *params.value_mut(id) = tensor;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, CheckpointError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}
