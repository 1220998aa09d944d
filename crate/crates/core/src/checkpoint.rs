//! Model checkpoint I/O.
//!
//! Layout: magic `SSIM`, u32 version (LE), u64 header length (LE), UTF-8
//! JSON header (config, vocabulary hash, seed, metadata, parameter order),
//! then all parameter tensors as float32 LE in header-declared order.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{init_params, ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SSIM";
pub const CHECKPOINT_VERSION: u32 = 1;

const HEADER_LEN: u64 = 16;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ParamRecord {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    schema_version: u32,
    config: ModelConfig,
    vocabulary_hash: String,
    seed: u64,
    metadata: serde_json::Value,
    params: Vec<ParamRecord>,
}

/// Everything stored alongside the parameter payload.
#[derive(Debug, Clone)]
pub struct CheckpointInfo {
    pub config: ModelConfig,
    pub vocabulary_hash: String,
    pub seed: u64,
    pub metadata: serde_json::Value,
}

pub fn save_checkpoint(
    params: &ModelParams,
    vocabulary_hash: &str,
    seed: u64,
    metadata: serde_json::Value,
    path: &Path,
) -> Result<()> {
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_VERSION,
        config: params.cfg.clone(),
        vocabulary_hash: vocabulary_hash.to_string(),
        seed,
        metadata,
        params: params
            .entries()
            .map(|(def, _)| ParamRecord {
                name: def.name.clone(),
                shape: def.shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::invalid(format!("header serialization failed: {e}")))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    out.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&header_bytes)?;
    let mut buf = Vec::new();
    for (_, tensor) in params.entries() {
        buf.clear();
        buf.reserve(tensor.numel() * 4);
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointInfo)> {
    let file = File::open(path)?;
    let total_len = file.metadata()?.len();
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 4];
    reader
        .read_exact(&mut magic)
        .map_err(|_| Error::format(0, "unexpected end of file"))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"SSIM\"")));
    }
    let mut version_bytes = [0u8; 4];
    reader
        .read_exact(&mut version_bytes)
        .map_err(|_| Error::format(4, "unexpected end of file"))?;
    let version = u32::from_le_bytes(version_bytes);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let mut len_bytes = [0u8; 8];
    reader
        .read_exact(&mut len_bytes)
        .map_err(|_| Error::format(8, "unexpected end of file"))?;
    let header_len = u64::from_le_bytes(len_bytes);
    if HEADER_LEN + header_len > total_len {
        return Err(Error::format(
            8,
            format!("header length {header_len} exceeds file size {total_len}"),
        ));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    reader
        .read_exact(&mut header_bytes)
        .map_err(|_| Error::format(HEADER_LEN, "unexpected end of file"))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::format(HEADER_LEN, format!("header parse failed: {e}")))?;
    if header.schema_version != CHECKPOINT_VERSION {
        return Err(Error::format(HEADER_LEN, "header schema version mismatch"));
    }
    header
        .config
        .validate()
        .map_err(|e| Error::format(HEADER_LEN, format!("invalid config: {e}")))?;

    // The header's parameter inventory must match the config's exactly.
    let mut params = init_params(&header.config, 0)
        .map_err(|e| Error::format(HEADER_LEN, format!("cannot build parameters: {e}")))?;
    if header.params.len() != params.len() {
        return Err(Error::format(
            HEADER_LEN,
            format!(
                "header declares {} parameters, config defines {}",
                header.params.len(),
                params.len()
            ),
        ));
    }
    let payload_base = HEADER_LEN + header_len;
    let mut offset = payload_base;
    let expected: Vec<(String, Vec<usize>)> = params
        .entries()
        .map(|(def, _)| (def.name.clone(), def.shape.clone()))
        .collect();
    for (rec, (name, shape)) in header.params.iter().zip(&expected) {
        if &rec.name != name || &rec.shape != shape {
            return Err(Error::format(
                offset,
                format!(
                    "parameter {}: expected {name} with shape {shape:?}, found shape {:?}",
                    rec.name, rec.shape
                ),
            ));
        }
        let numel: usize = rec.shape.iter().product();
        let mut bytes = vec![0u8; numel * 4];
        reader.read_exact(&mut bytes).map_err(|_| {
            Error::format(offset, format!("parameter {}: payload truncated", rec.name))
        })?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                offset,
                format!("parameter {}: non-finite values", rec.name),
            ));
        }
        params.set(name, Tensor::from_vec(shape, data).unwrap())?;
        offset += numel as u64 * 4;
    }
    if offset != total_len {
        return Err(Error::format(
            offset,
            format!("file has {total_len} bytes, parameters account for {offset}"),
        ));
    }

    let info = CheckpointInfo {
        config: header.config,
        vocabulary_hash: header.vocabulary_hash,
        seed: header.seed,
        metadata: header.metadata,
    };
    Ok((params, info))
}

/// The raw float32 parameter payload, e.g. for determinism hashing.
pub fn checkpoint_payload(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < HEADER_LEN as usize || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let base = HEADER_LEN as usize + header_len;
    if base > bytes.len() {
        return Err(Error::format(8, "header length exceeds file size"));
    }
    Ok(bytes[base..].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            input_dim: 6,
            hidden_dim: 8,
            n_heads: 2,
            vocab_size: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_value_exact_at_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ssim");
        let params = init_params(&cfg(), 42).unwrap();
        save_checkpoint(&params, "vhash", 42, serde_json::json!({"note": "t"}), &path).unwrap();
        let (loaded, info) = load_checkpoint(&path).unwrap();
        assert_eq!(info.vocabulary_hash, "vhash");
        assert_eq!(info.seed, 42);
        for ((da, ta), (_, tb)) in params.entries().zip(loaded.entries()) {
            for (a, b) in ta.data().iter().zip(tb.data()) {
                assert_eq!(*a as f32, *b as f32, "{}", da.name);
            }
        }
        // Saving the loaded params reproduces the payload bit for bit.
        let path2 = dir.path().join("model2.ssim");
        save_checkpoint(&loaded, "vhash", 42, serde_json::json!({"note": "t"}), &path2).unwrap();
        assert_eq!(
            checkpoint_payload(&path).unwrap(),
            checkpoint_payload(&path2).unwrap()
        );
    }

    #[test]
    fn corrupt_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ssim");
        let params = init_params(&cfg(), 1).unwrap();
        save_checkpoint(&params, "h", 1, serde_json::Value::Null, &path).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[2] = b'!';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { offset: 0, .. })));

        save_checkpoint(&params, "h", 1, serde_json::Value::Null, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn version_mismatch_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ssim");
        let params = init_params(&cfg(), 1).unwrap();
        save_checkpoint(&params, "h", 1, serde_json::Value::Null, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 7;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { offset: 4, .. })));
    }
}
