//! Checkpoint files: the full parameter state of an encoder/head pair plus
//! the training configuration, RNG state, and epoch counter.
//!
//! Layout, all integers little-endian: magic `CRCK`, version u16, a
//! u32-length-prefixed UTF-8 JSON config, a parameter table (u32 count,
//! then per parameter: u16 name length + name, u8 trainable flag, u8 rank,
//! u32 per dimension, f64 values), a u32-length-prefixed opaque RNG-state
//! blob, and a u32 epoch. Anything after the epoch is an error — a valid
//! file has exactly one interpretation, byte for byte.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_encoder, Encoder, EncoderConfig, ModelError, Param, ProjectionHead};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CRCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Everything needed to rebuild the architecture a checkpoint belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub encoder: EncoderConfig,
    pub head_hidden_dim: usize,
    pub head_projection_dim: usize,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: CheckpointConfig,
    /// Encoder entries first, then the head's, in store order.
    pub params: Vec<Param>,
    /// Opaque trainer-owned bytes, round-tripped untouched.
    pub rng_state: Vec<u8>,
    pub epoch: u32,
}

impl Checkpoint {
    /// Captures the current state of a model pair.
    pub fn snapshot(
        encoder: &Encoder,
        head: &ProjectionHead,
        rng_state: Vec<u8>,
        epoch: u32,
    ) -> Checkpoint {
        let mut params: Vec<Param> = encoder.params.entries().to_vec();
        params.extend(head.params.entries().iter().cloned());
        Checkpoint {
            config: CheckpointConfig {
                encoder: encoder.config().clone(),
                head_hidden_dim: head.hidden_dim(),
                head_projection_dim: head.projection_dim(),
            },
            params,
            rng_state,
            epoch,
        }
    }

    /// Rebuilds the encoder and head this checkpoint describes. The stored
    /// parameters must match the architecture the config declares, name by
    /// name and shape by shape.
    pub fn restore(&self) -> Result<(Encoder, ProjectionHead), ModelError> {
        let mut encoder = build_encoder(&self.config.encoder, 0)?;
        let mut head = ProjectionHead::build_head(
            self.config.encoder.representation_dim(),
            self.config.head_hidden_dim,
            self.config.head_projection_dim,
            0,
        )?;
        let (head_params, encoder_params): (Vec<Param>, Vec<Param>) = self
            .params
            .iter()
            .cloned()
            .partition(|p| p.name.starts_with("head."));
        encoder.params.load_entries(&encoder_params)?;
        head.params.load_entries(&head_params)?;
        Ok((encoder, head))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), ModelError> {
    let config_json = serde_json::to_string(&ckpt.config).map_err(|err| ModelError::Format {
        message: format!("config serialization failed: {err}"),
    })?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    write_bytes(&mut w, config_json.as_bytes())?;
    w.write_all(&(ckpt.params.len() as u32).to_le_bytes())?;
    for param in &ckpt.params {
        let name = param.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[u8::from(param.trainable)])?;
        w.write_all(&[param.shape.len() as u8])?;
        for &dim in &param.shape {
            w.write_all(&(dim as u32).to_le_bytes())?;
        }
        for &value in &param.data {
            w.write_all(&value.to_le_bytes())?;
        }
    }
    write_bytes(&mut w, &ckpt.rng_state)?;
    w.write_all(&ckpt.epoch.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(ModelError::Format {
            message: format!("bad magic {magic:?}, not a checkpoint file"),
        });
    }
    let version = read_u16(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Format {
            message: format!("unsupported version {version}"),
        });
    }
    let config_bytes = read_bytes(&mut r)?;
    let config_json = String::from_utf8(config_bytes).map_err(|_| ModelError::Format {
        message: "config is not valid UTF-8".to_string(),
    })?;
    let config: CheckpointConfig =
        serde_json::from_str(&config_json).map_err(|err| ModelError::Format {
            message: format!("config does not parse: {err}"),
        })?;

    let count = read_u32(&mut r)? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        read_exact(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes).map_err(|_| ModelError::Format {
            message: "parameter name is corrupt".to_string(),
        })?;
        let mut flag = [0u8; 1];
        read_exact(&mut r, &mut flag)?;
        let trainable = match flag[0] {
            0 => false,
            1 => true,
            other => {
                return Err(ModelError::Format {
                    message: format!("parameter '{name}' has bad trainable flag {other}"),
                })
            }
        };
        let mut rank = [0u8; 1];
        read_exact(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            read_exact(&mut r, &mut buf)?;
            let value = f64::from_le_bytes(buf);
            if !value.is_finite() {
                return Err(ModelError::Format {
                    message: format!("parameter '{name}' contains a non-finite value"),
                });
            }
            data.push(value);
        }
        params.push(Param {
            name,
            shape,
            data,
            trainable,
        });
    }

    let rng_state = read_bytes(&mut r)?;
    let epoch = read_u32(&mut r)?;

    let mut excess = [0u8; 1];
    if r.read(&mut excess)? != 0 {
        return Err(ModelError::Format {
            message: "trailing bytes after the epoch field".to_string(),
        });
    }
    Ok(Checkpoint {
        config,
        params,
        rng_state,
        epoch,
    })
}

fn write_bytes<W: Write>(w: &mut W, bytes: &[u8]) -> Result<(), ModelError> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_bytes<R: Read>(r: &mut R) -> Result<Vec<u8>, ModelError> {
    let len = read_u32(r)? as usize;
    let mut bytes = vec![0u8; len];
    read_exact(r, &mut bytes)?;
    Ok(bytes)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ModelError> {
    r.read_exact(buf).map_err(|err| {
        if err.kind() == std::io::ErrorKind::UnexpectedEof {
            ModelError::Format {
                message: "file is truncated".to_string(),
            }
        } else {
            ModelError::Io(err)
        }
    })
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16, ModelError> {
    let mut buf = [0u8; 2];
    read_exact(r, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ModelError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
