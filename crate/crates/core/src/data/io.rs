//! Loading image corpora from disk and the binary dataset cache.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{crop_border, scale_image, DataError, Dataset, ImageRecord, NUM_CLASSES};
use crate::tensor::Tensor;

/// A record that was listed in the label file but could not be decoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedRecord {
    pub source_id: String,
    pub reason: String,
}

/// Result of a corpus load: the usable dataset plus everything skipped.
#[derive(Debug)]
pub struct LoadOutcome {
    pub dataset: Dataset,
    pub skipped: Vec<SkippedRecord>,
}

/// Parses a `filename,label` CSV. The header line is mandatory and checked
/// literally; labels must parse as integers in `0..6`.
fn parse_label_file(path: &Path) -> Result<Vec<(String, usize)>, DataError> {
    let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
        message: format!("{}: {e}", path.display()),
    })?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "filename,label" => {}
        Some((_, header)) => {
            return Err(DataError::LabelParse {
                line: 1,
                message: format!("expected header 'filename,label', got '{}'", header.trim()),
            })
        }
        None => {
            return Err(DataError::LabelParse {
                line: 1,
                message: "file is empty".to_string(),
            })
        }
    }
    for (idx, line) in lines {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let (name, label_str) = trimmed.split_once(',').ok_or(DataError::LabelParse {
            line: line_no,
            message: "expected 'filename,label'".to_string(),
        })?;
        let name = name.trim();
        if name.is_empty() {
            return Err(DataError::LabelParse {
                line: line_no,
                message: "empty filename".to_string(),
            });
        }
        let label: usize = label_str.trim().parse().map_err(|_| DataError::LabelParse {
            line: line_no,
            message: format!("label '{}' is not an integer", label_str.trim()),
        })?;
        if label >= NUM_CLASSES {
            return Err(DataError::InvalidLabel {
                label: label.min(u8::MAX as usize) as u8,
                source_id: name.to_string(),
            });
        }
        if !seen.insert(name.to_string()) {
            return Err(DataError::DuplicateSourceId {
                source_id: name.to_string(),
            });
        }
        entries.push((name.to_string(), label));
    }
    Ok(entries)
}

/// Loads a labeled image corpus: grayscale files listed in `label_file`,
/// each border-cropped by `crop_fraction` and percentile-normalized.
///
/// Records are ordered by filename regardless of label-file order, so the
/// dataset layout is independent of how the CSV was assembled. A listed
/// file that is absent on disk is a hard error; a file that exists but
/// fails to decode is skipped and reported in the outcome.
pub fn load_oath_dataset(
    image_dir: &Path,
    label_file: &Path,
    crop_fraction: f64,
) -> Result<LoadOutcome, DataError> {
    let mut entries = parse_label_file(label_file)?;
    entries.sort_by(|a, b| a.0.cmp(&b.0));
    let mut records = Vec::with_capacity(entries.len());
    let mut skipped = Vec::new();
    for (name, label) in entries {
        let path = image_dir.join(&name);
        if !path.is_file() {
            return Err(DataError::MissingImage {
                path: path.display().to_string(),
            });
        }
        let decoded = match image::open(&path) {
            Ok(img) => img,
            Err(e) => {
                skipped.push(SkippedRecord {
                    source_id: name,
                    reason: format!("decode failed: {e}"),
                });
                continue;
            }
        };
        let gray = decoded.to_luma8();
        let (w, h) = (gray.width() as usize, gray.height() as usize);
        let raw: Vec<f64> = gray.into_raw().into_iter().map(f64::from).collect();
        let raw_t = Tensor::new(vec![h, w], raw).expect("decoder dimensions match buffer");
        let cropped = crop_border(&raw_t, crop_fraction)?;
        let (normalized, degenerate) = scale_image(&cropped)?;
        let (ch, cw) = (normalized.shape()[0], normalized.shape()[1]);
        let pixels = Tensor::new(vec![1, ch, cw], normalized.data().to_vec())
            .expect("normalization preserves the pixel count");
        records.push(ImageRecord {
            pixels,
            label,
            source_id: name,
            degenerate,
        });
    }
    Ok(LoadOutcome {
        dataset: Dataset::from_records(records)?,
        skipped,
    })
}

const CACHE_MAGIC: &[u8; 4] = b"CRDS";
const CACHE_VERSION: u16 = 1;

/// Writes the dataset to the binary cache format: magic `CRDS`, version,
/// record count, then per record the id (u16 length prefix), label byte,
/// u16 height and width, and f32 little-endian pixels.
pub fn write_cache(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::Io {
        message: format!("{}: {e}", path.display()),
    })?;
    let mut out = BufWriter::new(file);
    out.write_all(CACHE_MAGIC)?;
    out.write_all(&CACHE_VERSION.to_le_bytes())?;
    let count = u32::try_from(dataset.len()).map_err(|_| DataError::CacheFormat {
        message: format!("{} records exceed the u32 record count", dataset.len()),
    })?;
    out.write_all(&count.to_le_bytes())?;
    for rec in &dataset.records {
        let id_bytes = rec.source_id.as_bytes();
        let id_len = u16::try_from(id_bytes.len()).map_err(|_| DataError::CacheFormat {
            message: format!("source id '{}' exceeds u16 length", rec.source_id),
        })?;
        let shape = rec.pixels.shape();
        debug_assert_eq!(shape.len(), 3);
        let h = u16::try_from(shape[1]).map_err(|_| DataError::CacheFormat {
            message: format!("height {} exceeds u16", shape[1]),
        })?;
        let w = u16::try_from(shape[2]).map_err(|_| DataError::CacheFormat {
            message: format!("width {} exceeds u16", shape[2]),
        })?;
        out.write_all(&id_len.to_le_bytes())?;
        out.write_all(id_bytes)?;
        out.write_all(&[rec.label as u8])?;
        out.write_all(&h.to_le_bytes())?;
        out.write_all(&w.to_le_bytes())?;
        for v in rec.pixels.data() {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Reads a cache written by [`write_cache`], validating magic, version, and
/// exact length. The degeneracy flag is reconstructed from the pixels: a
/// normalized image is all-zero exactly when normalization was degenerate.
pub fn read_cache(path: &Path) -> Result<Dataset, DataError> {
    let file = File::open(path).map_err(|e| DataError::Io {
        message: format!("{}: {e}", path.display()),
    })?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(DataError::CacheFormat {
            message: format!("bad magic {magic:?}, expected {CACHE_MAGIC:?}"),
        });
    }
    let version = read_u16(&mut reader)?;
    if version != CACHE_VERSION {
        return Err(DataError::CacheFormat {
            message: format!("unsupported version {version}, expected {CACHE_VERSION}"),
        });
    }
    let count = read_u32(&mut reader)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u16(&mut reader)? as usize;
        let mut id_bytes = vec![0u8; id_len];
        read_exact(&mut reader, &mut id_bytes)?;
        let source_id = String::from_utf8(id_bytes).map_err(|_| DataError::CacheFormat {
            message: "source id is not valid UTF-8".to_string(),
        })?;
        let mut label_byte = [0u8; 1];
        read_exact(&mut reader, &mut label_byte)?;
        let label = label_byte[0] as usize;
        if label >= NUM_CLASSES {
            return Err(DataError::InvalidLabel {
                label: label_byte[0],
                source_id,
            });
        }
        let h = read_u16(&mut reader)? as usize;
        let w = read_u16(&mut reader)? as usize;
        if h == 0 || w == 0 {
            return Err(DataError::CacheFormat {
                message: format!("record '{source_id}' has empty dimensions {h}x{w}"),
            });
        }
        let mut data = Vec::with_capacity(h * w);
        let mut buf = [0u8; 4];
        for _ in 0..h * w {
            read_exact(&mut reader, &mut buf)?;
            let v = f32::from_le_bytes(buf) as f64;
            if !v.is_finite() {
                return Err(DataError::CacheFormat {
                    message: format!("record '{source_id}' contains non-finite pixels"),
                });
            }
            data.push(v);
        }
        let degenerate = data.iter().all(|v| *v == 0.0);
        records.push(ImageRecord {
            pixels: Tensor::new(vec![1, h, w], data).expect("pixel count matches dims"),
            label,
            source_id,
            degenerate,
        });
    }
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(DataError::CacheFormat {
            message: "trailing bytes after the last record".to_string(),
        });
    }
    Dataset::from_records(records)
}

fn read_exact<R: Read>(reader: &mut R, buf: &mut [u8]) -> Result<(), DataError> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            DataError::CacheFormat {
                message: "file is truncated".to_string(),
            }
        } else {
            DataError::Io {
                message: e.to_string(),
            }
        }
    })
}

fn read_u16<R: Read>(reader: &mut R) -> Result<u16, DataError> {
    let mut buf = [0u8; 2];
    read_exact(reader, &mut buf)?;
    Ok(u16::from_le_bytes(buf))
}

fn read_u32<R: Read>(reader: &mut R) -> Result<u32, DataError> {
    let mut buf = [0u8; 4];
    read_exact(reader, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}
