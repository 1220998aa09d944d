//! Dataset container I/O.
//!
//! Layout: magic `SSIR`, u32 version (LE), u64 manifest length (LE), UTF-8
//! JSON manifest, then a float32 LE payload holding every sample's raw
//! window in time-major, channel-major, axis-minor order. Round-trips are
//! bit-exact because all in-memory raw values are f32.

use super::{DatasetSplit, LabeledSample, SampleData, SampleKind, Vocabulary};
use crate::error::{Error, Result};
use crate::signal::RawWindow;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const CONTAINER_MAGIC: [u8; 4] = *b"SSIR";
pub const CONTAINER_VERSION: u32 = 1;

const HEADER_LEN: u64 = 16;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    seed: u64,
    vocabulary: VocabManifest,
    samples: Vec<SampleRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabManifest {
    tokens: Vec<String>,
    blank_id: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct SampleRecord {
    id: u64,
    split: String,
    kind: String,
    participant: u32,
    labels: Vec<u32>,
    t_len: u32,
    channels: u32,
    axes: u32,
    sample_rate_hz: f64,
    sources: Vec<u64>,
    /// Byte offset of this sample's values within the float payload.
    payload_offset: u64,
    payload_len: u64,
}

pub fn write_container(split: &DatasetSplit, path: &Path) -> Result<()> {
    split.validate()?;
    let mut records = Vec::new();
    let mut payload_offset = 0u64;
    let partitions: [(&str, &[LabeledSample]); 3] = [
        ("train", &split.train),
        ("validation", &split.validation),
        ("test", &split.test),
    ];
    for (name, samples) in partitions {
        for s in samples {
            let w = s.raw()?;
            let payload_len = (w.values.len() * 4) as u64;
            records.push(SampleRecord {
                id: s.id,
                split: name.to_string(),
                kind: s.kind.as_str().to_string(),
                participant: s.participant,
                labels: s.labels.clone(),
                t_len: w.t_len as u32,
                channels: w.channels as u32,
                axes: w.axes as u32,
                sample_rate_hz: w.sample_rate_hz,
                sources: s.sources.clone(),
                payload_offset,
                payload_len,
            });
            payload_offset += payload_len;
        }
    }
    let manifest = Manifest {
        schema_version: CONTAINER_VERSION,
        seed: split.seed,
        vocabulary: VocabManifest {
            tokens: split.vocabulary.tokens().to_vec(),
            blank_id: super::BLANK_ID,
        },
        samples: records,
    };
    let manifest_bytes = serde_json::to_vec(&manifest)
        .map_err(|e| Error::invalid(format!("manifest serialization failed: {e}")))?;

    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&CONTAINER_MAGIC)?;
    out.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_bytes)?;
    let mut buf = Vec::new();
    for (_, samples) in partitions {
        for s in samples {
            let w = s.raw()?;
            buf.clear();
            buf.reserve(w.values.len() * 4);
            for v in &w.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<DatasetSplit> {
    let file = File::open(path)?;
    let total_len = file.metadata()?.len();
    let mut reader = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact_at(&mut reader, &mut magic, 0)?;
    if magic != CONTAINER_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"SSIR\"")));
    }
    let mut version_bytes = [0u8; 4];
    read_exact_at(&mut reader, &mut version_bytes, 4)?;
    let version = u32::from_le_bytes(version_bytes);
    if version != CONTAINER_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported container version {version}, expected {CONTAINER_VERSION}"),
        ));
    }
    let mut len_bytes = [0u8; 8];
    read_exact_at(&mut reader, &mut len_bytes, 8)?;
    let manifest_len = u64::from_le_bytes(len_bytes);
    if HEADER_LEN + manifest_len > total_len {
        return Err(Error::format(
            8,
            format!("manifest length {manifest_len} exceeds file size {total_len}"),
        ));
    }

    let mut manifest_bytes = vec![0u8; manifest_len as usize];
    read_exact_at(&mut reader, &mut manifest_bytes, HEADER_LEN)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::format(HEADER_LEN, format!("manifest parse failed: {e}")))?;
    if manifest.schema_version != CONTAINER_VERSION {
        return Err(Error::format(HEADER_LEN, "manifest schema version mismatch"));
    }
    if manifest.vocabulary.blank_id != super::BLANK_ID {
        return Err(Error::format(HEADER_LEN, "vocabulary blank id must be 0"));
    }
    let vocabulary = Vocabulary::new(manifest.vocabulary.tokens.clone())
        .map_err(|e| Error::format(HEADER_LEN, format!("invalid vocabulary: {e}")))?;

    let payload_base = HEADER_LEN + manifest_len;
    let payload_len = total_len - payload_base;

    let mut train = Vec::new();
    let mut validation = Vec::new();
    let mut test = Vec::new();
    let mut cursor = 0u64;
    for (i, rec) in manifest.samples.iter().enumerate() {
        let rec_offset = payload_base + rec.payload_offset;
        let expected = rec.t_len as u64 * rec.channels as u64 * rec.axes as u64 * 4;
        if rec.payload_len != expected {
            return Err(Error::format(
                rec_offset,
                format!(
                    "sample {}: payload length {} does not match shape {}x{}x{}",
                    rec.id, rec.payload_len, rec.t_len, rec.channels, rec.axes
                ),
            ));
        }
        if rec.payload_offset != cursor {
            return Err(Error::format(
                rec_offset,
                format!("sample {}: unexpected payload offset {}", rec.id, rec.payload_offset),
            ));
        }
        if rec.payload_offset + rec.payload_len > payload_len {
            return Err(Error::format(
                rec_offset,
                format!("sample {}: payload truncated", rec.id),
            ));
        }
        for &l in &rec.labels {
            if l == super::BLANK_ID || l > vocabulary.size() {
                return Err(Error::format(
                    rec_offset,
                    format!(
                        "sample {}: label {l} outside vocabulary of {} tokens",
                        rec.id,
                        vocabulary.size()
                    ),
                ));
            }
        }
        let kind = SampleKind::parse(&rec.kind).ok_or_else(|| {
            Error::format(rec_offset, format!("sample {}: unknown kind {:?}", rec.id, rec.kind))
        })?;

        let mut bytes = vec![0u8; rec.payload_len as usize];
        reader.read_exact(&mut bytes).map_err(|_| {
            Error::format(rec_offset, format!("sample {}: payload truncated", rec.id))
        })?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let window = RawWindow::new(
            values,
            rec.t_len as usize,
            rec.channels as usize,
            rec.axes as usize,
            rec.sample_rate_hz,
        )
        .map_err(|e| Error::format(rec_offset, format!("sample {}: {e}", rec.id)))?;
        let sample = LabeledSample {
            id: rec.id,
            data: SampleData::Raw(window),
            labels: rec.labels.clone(),
            participant: rec.participant,
            kind,
            sources: rec.sources.clone(),
        };
        match rec.split.as_str() {
            "train" => train.push(sample),
            "validation" => validation.push(sample),
            "test" => test.push(sample),
            other => {
                return Err(Error::format(
                    rec_offset,
                    format!("sample {}: unknown split {other:?}", rec.id),
                ))
            }
        }
        cursor += rec.payload_len;
        let _ = i;
    }
    if cursor != payload_len {
        return Err(Error::format(
            payload_base + cursor,
            format!("payload has {payload_len} bytes, manifest accounts for {cursor}"),
        ));
    }

    let split = DatasetSplit {
        train,
        validation,
        test,
        seed: manifest.seed,
        vocabulary,
    };
    split.validate().map_err(|e| Error::format(HEADER_LEN, e.to_string()))?;
    Ok(split)
}

fn read_exact_at<R: Read>(reader: &mut R, buf: &mut [u8], offset: u64) -> Result<()> {
    reader
        .read_exact(buf)
        .map_err(|_| Error::format(offset, "unexpected end of file"))
}
