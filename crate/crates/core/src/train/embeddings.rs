//! Embedding artifacts: the binary `CREM` format, a CSV mirror, and the
//! per-epoch loss history CSV.
//!
//! `CREM` layout, integers little-endian: magic, version u16, N u32, d u32,
//! N·d f64 values row-major, one u8 label per row, then N length-prefixed
//! (u16) UTF-8 ids. Trailing bytes are an error, so equal content means
//! equal files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{EmbeddingSet, TrainError};
use crate::data::NUM_CLASSES;
use crate::tensor::Tensor;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"CREM";
pub const EMBEDDING_VERSION: u16 = 1;

pub fn write_embeddings(path: &Path, set: &EmbeddingSet) -> Result<(), TrainError> {
    let n = set.len();
    let d = set.dim();
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&EMBEDDING_MAGIC)?;
    w.write_all(&EMBEDDING_VERSION.to_le_bytes())?;
    w.write_all(&(n as u32).to_le_bytes())?;
    w.write_all(&(d as u32).to_le_bytes())?;
    for &value in set.embeddings.data() {
        w.write_all(&value.to_le_bytes())?;
    }
    for &label in &set.labels {
        w.write_all(&[label as u8])?;
    }
    for id in &set.source_ids {
        let bytes = id.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet, TrainError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != EMBEDDING_MAGIC {
        return Err(TrainError::Format {
            message: format!("bad magic {magic:?}, not an embedding file"),
        });
    }
    let version = read_u16(&mut r)?;
    if version != EMBEDDING_VERSION {
        return Err(TrainError::Format {
            message: format!("unsupported version {version}"),
        });
    }
    let n = read_u32(&mut r)? as usize;
    let d = read_u32(&mut r)? as usize;
    if d == 0 {
        return Err(TrainError::Format {
            message: "embedding dimension is zero".to_string(),
        });
    }
    let mut values = Vec::with_capacity(n * d);
    let mut buf = [0u8; 8];
    for _ in 0..n * d {
        read_exact(&mut r, &mut buf)?;
        let value = f64::from_le_bytes(buf);
        if !value.is_finite() {
            return Err(TrainError::Format {
                message: "embedding contains a non-finite value".to_string(),
            });
        }
        values.push(value);
    }
    let mut labels = Vec::with_capacity(n);
    let mut byte = [0u8; 1];
    for _ in 0..n {
        read_exact(&mut r, &mut byte)?;
        let label = byte[0] as usize;
        if label >= NUM_CLASSES {
            return Err(TrainError::Format {
                message: format!("label {label} is out of range"),
            });
        }
        labels.push(label);
    }
    let mut source_ids = Vec::with_capacity(n);
    for _ in 0..n {
        let len = read_u16(&mut r)? as usize;
        let mut bytes = vec![0u8; len];
        read_exact(&mut r, &mut bytes)?;
        let id = String::from_utf8(bytes).map_err(|_| TrainError::Format {
            message: "source id is not valid UTF-8".to_string(),
        })?;
        source_ids.push(id);
    }
    let mut excess = [0u8; 1];
    if r.read(&mut excess)? != 0 {
        return Err(TrainError::Format {
            message: "trailing bytes after the id table".to_string(),
        });
    }
    Ok(EmbeddingSet {
        embeddings: Tensor::new(vec![n, d], values)?,
        labels,
        source_ids,
    })
}

/// CSV mirror of the binary format: `id,label,e0..e{d-1}`. Values print in
/// Rust's shortest round-trippable form.
pub fn write_embeddings_csv(path: &Path, set: &EmbeddingSet) -> Result<(), TrainError> {
    let d = set.dim();
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "id,label")?;
    for j in 0..d {
        write!(w, ",e{j}")?;
    }
    writeln!(w)?;
    for i in 0..set.len() {
        write!(w, "{},{}", set.source_ids[i], set.labels[i])?;
        for value in set.row(i) {
            write!(w, ",{value}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Loss history as `epoch,mean_loss` with 1-based epoch numbers.
pub fn write_loss_history_csv(path: &Path, history: &[f64]) -> Result<(), TrainError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "epoch,mean_loss")?;
    for (i, loss) in history.iter().enumerate() {
        writeln!(w, "{},{loss}", i + 1)?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), TrainError> {
    r.read_exact(buf).map_err(|err| {
        if err.kind() == std::io::ErrorKind::UnexpectedEof {
            TrainError::Format {
                message: "file is truncated".to_string(),
            }
        } else {
            TrainError::Io(err)
        }
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, TrainError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, TrainError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
