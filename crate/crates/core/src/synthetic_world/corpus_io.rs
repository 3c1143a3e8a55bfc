//! On-disk corpus: `manifest.jsonl` (one JSON record descriptor per line)
//! next to `frames.bin` (magic `STOA`, u32 version, u32 T, u32 S, then
//! row-major little-endian f32 frames for every record in manifest order).

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{Caption, Detection, Frames, PosTag, SampleRecord};
use crate::error::{Result, StoaError};

pub const BLOB_MAGIC: &[u8; 4] = b"STOA";
pub const BLOB_VERSION: u32 = 1;
pub const BLOB_HEADER_BYTES: u64 = 16;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BLOB_FILE: &str = "frames.bin";

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordDescriptor {
    pub id: u64,
    pub offset: u64,
    pub tokens: Vec<u32>,
    pub tags: Vec<PosTag>,
    pub detections: Vec<Vec<Detection>>,
}

/// Summary returned by [`write_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub records: Vec<RecordDescriptor>,
    pub frames: usize,
    pub image_size: usize,
    pub manifest_path: PathBuf,
    pub blob_path: PathBuf,
    pub blob_bytes: u64,
}

pub fn write_corpus(samples: &[SampleRecord], dir: &Path) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir).map_err(|e| StoaError::io(dir, e))?;
    let (frames, size) = samples
        .first()
        .map_or((0, 0), |s| (s.frames.num_frames(), s.frames.size()));
    if let Some(bad) = samples
        .iter()
        .find(|s| (s.frames.num_frames(), s.frames.size()) != (frames, size))
    {
        return Err(StoaError::Config(format!(
            "sample {} has shape ({}, {}) but the corpus is ({frames}, {size})",
            bad.id,
            bad.frames.num_frames(),
            bad.frames.size()
        )));
    }

    let blob_path = dir.join(BLOB_FILE);
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob_io = |e| StoaError::io(&blob_path, e);
    let mut blob = BufWriter::new(File::create(&blob_path).map_err(blob_io)?);
    blob.write_all(BLOB_MAGIC).map_err(blob_io)?;
    for v in [BLOB_VERSION, frames as u32, size as u32] {
        blob.write_all(&v.to_le_bytes()).map_err(blob_io)?;
    }
    let mut offset = BLOB_HEADER_BYTES;
    let mut records = Vec::with_capacity(samples.len());
    let mut manifest = String::new();
    for s in samples {
        let mut bytes = Vec::with_capacity(s.frames.data().len() * 4);
        for v in s.frames.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        blob.write_all(&bytes).map_err(blob_io)?;
        let rec = RecordDescriptor {
            id: s.id,
            offset,
            tokens: s.caption.tokens.clone(),
            tags: s.caption.tags.clone(),
            detections: s.detections.clone(),
        };
        manifest.push_str(&serde_json::to_string(&rec).expect("descriptor serializes"));
        manifest.push('\n');
        offset += bytes.len() as u64;
        records.push(rec);
    }
    blob.flush().map_err(blob_io)?;
    std::fs::write(&manifest_path, manifest).map_err(|e| StoaError::io(&manifest_path, e))?;
    Ok(CorpusManifest {
        records,
        frames,
        image_size: size,
        manifest_path,
        blob_path,
        blob_bytes: offset,
    })
}

pub fn read_corpus(dir: &Path) -> Result<Vec<SampleRecord>> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let blob_path = dir.join(BLOB_FILE);
    let text = std::fs::read_to_string(&manifest_path).map_err(|e| StoaError::io(&manifest_path, e))?;
    let mut blob = Vec::new();
    File::open(&blob_path)
        .and_then(|mut f| f.read_to_end(&mut blob))
        .map_err(|e| StoaError::io(&blob_path, e))?;
    if blob.len() < BLOB_HEADER_BYTES as usize {
        if blob.len() >= 4 && &blob[..4] != BLOB_MAGIC {
            return Err(StoaError::format(&blob_path, "bad magic"));
        }
        return Err(StoaError::io(&blob_path, truncated("header")));
    }
    if &blob[..4] != BLOB_MAGIC {
        return Err(StoaError::format(&blob_path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(blob[4 * i..4 * i + 4].try_into().expect("4 bytes"));
    let version = word(1);
    if version != BLOB_VERSION {
        return Err(StoaError::format(&blob_path, format!("unsupported version {version}")));
    }
    let (frames, size) = (word(2) as usize, word(3) as usize);
    let floats = frames * 3 * size * size;

    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordDescriptor = serde_json::from_str(line)
            .map_err(|e| StoaError::format(&manifest_path, format!("line {}: {e}", lineno + 1)))?;
        if rec.tokens.len() != rec.tags.len() {
            return Err(StoaError::format(
                &manifest_path,
                format!("line {}: tokens and tags differ in length", lineno + 1),
            ));
        }
        let start = rec.offset as usize;
        let end = start + floats * 4;
        if end > blob.len() {
            return Err(StoaError::io(&blob_path, truncated("frame data")));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push(SampleRecord {
            id: rec.id,
            frames: Frames::from_data(frames, size, data),
            detections: rec.detections,
            caption: Caption {
                tokens: rec.tokens,
                tags: rec.tags,
            },
        });
    }
    Ok(out)
}

/// SHA-256 over the manifest followed by the frame blob, hex encoded.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for name in [MANIFEST_FILE, BLOB_FILE] {
        let p = dir.join(name);
        let bytes = std::fs::read(&p).map_err(|e| StoaError::io(&p, e))?;
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn truncated(what: &str) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::UnexpectedEof, format!("truncated {what}"))
}
