//! Flat binary checkpoints: named tensors stored back to back, each as a
//! little-endian record of name length (u32), UTF-8 name bytes, rank (u32),
//! dimension sizes (u64 each), and row-major values (f64 each).

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::string::FromUtf8Error;

use crate::tensor::{Tensor, TensorError};

const MAX_NAME_BYTES: u32 = 4096;
const MAX_RANK: u32 = 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("tensor name is not UTF-8: {0}")]
    BadName(#[from] FromUtf8Error),
    #[error("file ends inside the {at} field")]
    Truncated { at: &'static str },
    #[error("record `{name}` claims an implausible {what} of {got}")]
    Implausible { name: String, what: &'static str, got: u64 },
    #[error("tensor `{name}` appears twice")]
    DuplicateName { name: String },
    #[error("tensor `{name}` has shape {got:?}, expected {expected:?}")]
    ShapeMismatch { name: String, got: Vec<usize>, expected: Vec<usize> },
    #[error("checkpoint is missing tensor `{name}`")]
    MissingTensor { name: String },
    #[error("checkpoint holds a tensor `{name}` the target does not")]
    UnknownTensor { name: String },
    #[error("tensor: {0}")]
    Tensor(#[from] TensorError),
}

pub fn write_checkpoint<W: Write>(
    mut w: W,
    entries: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let mut seen = HashSet::new();
    for (name, tensor) in entries {
        if !seen.insert(name.as_str()) {
            return Err(CheckpointError::DuplicateName { name: name.clone() });
        }
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(tensor.shape().len() as u32).to_le_bytes())?;
        for &dim in tensor.shape() {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in tensor.data().iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    entries: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, entries)?;
    Ok(w.flush()?)
}

fn read_exact_or(
    r: &mut impl Read,
    buf: &mut [u8],
    at: &'static str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { at }
        } else {
            CheckpointError::Io(e)
        }
    })
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    loop {
        let mut len4 = [0u8; 4];
        if r.read(&mut len4[..1])? == 0 {
            break;
        }
        read_exact_or(&mut r, &mut len4[1..], "name length")?;
        let name_len = u32::from_le_bytes(len4);
        if name_len == 0 || name_len > MAX_NAME_BYTES {
            return Err(CheckpointError::Implausible {
                name: String::new(),
                what: "name length",
                got: name_len as u64,
            });
        }
        let mut name_bytes = vec![0u8; name_len as usize];
        read_exact_or(&mut r, &mut name_bytes, "name")?;
        let name = String::from_utf8(name_bytes)?;
        let mut rank4 = [0u8; 4];
        read_exact_or(&mut r, &mut rank4, "rank")?;
        let rank = u32::from_le_bytes(rank4);
        if rank > MAX_RANK {
            return Err(CheckpointError::Implausible { name, what: "rank", got: rank as u64 });
        }
        let mut shape = Vec::with_capacity(rank as usize);
        let mut elements = 1usize;
        for _ in 0..rank {
            let mut dim8 = [0u8; 8];
            read_exact_or(&mut r, &mut dim8, "dimensions")?;
            let dim = u64::from_le_bytes(dim8);
            elements = usize::try_from(dim)
                .ok()
                .and_then(|d| elements.checked_mul(d))
                .filter(|&e| e <= (u32::MAX as usize))
                .ok_or_else(|| CheckpointError::Implausible {
                    name: name.clone(),
                    what: "element count",
                    got: dim,
                })?;
            shape.push(dim as usize);
        }
        let mut raw = vec![0u8; elements * 8];
        read_exact_or(&mut r, &mut raw, "values")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::DuplicateName { name });
        }
        entries.push((name, Tensor::from_vec(&shape, data)?));
    }
    Ok(entries)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>, CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

/// Copies loaded values into the target tensors, matched by name. Every
/// target must be present with its exact shape, and the checkpoint may not
/// hold names the target lacks.
pub fn restore_named(
    loaded: &[(String, Tensor)],
    targets: &[(String, Tensor)],
) -> Result<(), CheckpointError> {
    let target_names: HashSet<&str> = targets.iter().map(|(n, _)| n.as_str()).collect();
    for (name, _) in loaded {
        if !target_names.contains(name.as_str()) {
            return Err(CheckpointError::UnknownTensor { name: name.clone() });
        }
    }
    for (name, target) in targets {
        let source = loaded
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::MissingTensor { name: name.clone() })?;
        if source.shape() != target.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.clone(),
                got: source.shape().to_vec(),
                expected: target.shape().to_vec(),
            });
        }
        target.set_data(&source.to_vec())?;
    }
    Ok(())
}
