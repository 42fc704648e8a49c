//! Chunked MFCC features on disk.
//!
//! Extraction writes one record file per utterance (magic `DFFC`, same
//! version/CRC framing as the other binary formats) holding every chunk
//! as a chunk_len x n_mfcc little-endian f64 matrix, plus one
//! `chunks.csv` index mapping record files back to speaker, session and
//! label. Both are deterministic functions of the input audio and the
//! feature configuration.

use std::path::{Path, PathBuf};

use dfmim_core::Tensor;
use serde::Deserialize;
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DFFC";
pub const FORMAT_VERSION: u32 = 1;
pub const INDEX_NAME: &str = "chunks.csv";

#[derive(Debug, Error)]
pub enum FeatureFileError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt feature file: {0}")]
    Corrupt(String),
    #[error("feature file version {got} is not supported (this build reads {FORMAT_VERSION})")]
    VersionMismatch { got: u32 },
    #[error("feature index error: {0}")]
    Index(String),
}

fn corrupt(msg: impl Into<String>) -> FeatureFileError {
    FeatureFileError::Corrupt(msg.into())
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureFileError + '_ {
    move |source| FeatureFileError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// All chunks of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRecord {
    pub chunks: Vec<Tensor>,
}

impl ChunkRecord {
    pub fn new(chunks: Vec<Tensor>) -> Result<Self, FeatureFileError> {
        let first = chunks
            .first()
            .ok_or_else(|| corrupt("a record needs at least one chunk".to_string()))?;
        let shape = first.shape().to_vec();
        if shape.len() != 2 {
            return Err(corrupt(format!("chunks must be rank-2, got shape {shape:?}")));
        }
        if !chunks.iter().all(|c| c.shape() == shape) {
            return Err(corrupt("chunks disagree on shape".to_string()));
        }
        Ok(Self { chunks })
    }

    pub fn chunk_len(&self) -> usize {
        self.chunks[0].rows()
    }

    pub fn n_mfcc(&self) -> usize {
        self.chunks[0].cols()
    }
}

pub fn save_record(record: &ChunkRecord, path: &Path) -> Result<(), FeatureFileError> {
    let mut payload = Vec::new();
    payload.extend_from_slice(&(record.chunks.len() as u32).to_le_bytes());
    payload.extend_from_slice(&(record.chunk_len() as u32).to_le_bytes());
    payload.extend_from_slice(&(record.n_mfcc() as u32).to_le_bytes());
    for chunk in &record.chunks {
        for &v in chunk.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    std::fs::write(path, out).map_err(io_err(path))
}

pub fn load_record(path: &Path) -> Result<ChunkRecord, FeatureFileError> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode_record(&bytes)
}

pub(crate) fn decode_record(bytes: &[u8]) -> Result<ChunkRecord, FeatureFileError> {
    if bytes.len() < 24 {
        return Err(corrupt(format!("{} bytes is too short", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(corrupt("bad magic, not a feature file".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(FeatureFileError::VersionMismatch { got: version });
    }
    let stored_crc = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let payload = &bytes[12..];
    if stored_crc != crc32fast::hash(payload) {
        return Err(corrupt("checksum mismatch".to_string()));
    }
    let n_chunks = u32::from_le_bytes(payload[0..4].try_into().expect("4 bytes")) as usize;
    let rows = u32::from_le_bytes(payload[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(payload[8..12].try_into().expect("4 bytes")) as usize;
    if n_chunks == 0 || rows == 0 || cols == 0 {
        return Err(corrupt(format!(
            "implausible dimensions n_chunks={n_chunks} rows={rows} cols={cols}"
        )));
    }
    let want = 12 + 8 * n_chunks * rows * cols;
    if payload.len() != want {
        return Err(corrupt(format!(
            "payload holds {} bytes, dimensions require {want}",
            payload.len()
        )));
    }
    let mut pos = 12;
    let mut chunks = Vec::with_capacity(n_chunks);
    for _ in 0..n_chunks {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(payload[pos..pos + 8].try_into().expect("8 bytes")));
            pos += 8;
        }
        chunks.push(Tensor::new(vec![rows, cols], data).map_err(|e| corrupt(e.to_string()))?);
    }
    ChunkRecord::new(chunks)
}

/// One row of `chunks.csv`: a record file plus its provenance.
#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub speaker: String,
    pub session: String,
    pub label: String,
    pub n_chunks: usize,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FeatureIndex {
    pub entries: Vec<IndexEntry>,
}

const INDEX_HEADER: [&str; 6] = ["file", "speaker", "session", "label", "n_chunks", "source"];

impl FeatureIndex {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, FeatureFileError> {
        let path = dir.join(INDEX_NAME);
        let mut w =
            csv::Writer::from_path(&path).map_err(|e| FeatureFileError::Index(e.to_string()))?;
        w.write_record(INDEX_HEADER)
            .map_err(|e| FeatureFileError::Index(e.to_string()))?;
        for entry in &self.entries {
            let n_chunks = entry.n_chunks.to_string();
            w.write_record([
                entry.file.as_str(),
                entry.speaker.as_str(),
                entry.session.as_str(),
                entry.label.as_str(),
                n_chunks.as_str(),
                entry.source.as_str(),
            ])
            .map_err(|e| FeatureFileError::Index(e.to_string()))?;
        }
        w.flush().map_err(io_err(&path))?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self, FeatureFileError> {
        let path = dir.join(INDEX_NAME);
        let file = std::fs::File::open(&path).map_err(io_err(&path))?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| FeatureFileError::Index(e.to_string()))?
            .clone();
        let got: Vec<&str> = headers.iter().collect();
        if got != INDEX_HEADER {
            return Err(FeatureFileError::Index(format!(
                "expected header {}, got {}",
                INDEX_HEADER.join(","),
                got.join(",")
            )));
        }
        let mut entries = Vec::new();
        for record in reader.deserialize::<IndexEntry>() {
            entries.push(record.map_err(|e| FeatureFileError::Index(e.to_string()))?);
        }
        Ok(Self { entries })
    }

    /// Loads every record, resolving file names against `dir`. Chunk
    /// counts are revalidated against the index.
    pub fn load_records(&self, dir: &Path) -> Result<Vec<ChunkRecord>, FeatureFileError> {
        self.entries
            .iter()
            .map(|e| {
                let record = load_record(&dir.join(&e.file))?;
                if record.chunks.len() != e.n_chunks {
                    return Err(FeatureFileError::Index(format!(
                        "{} holds {} chunks, index says {}",
                        e.file,
                        record.chunks.len(),
                        e.n_chunks
                    )));
                }
                Ok(record)
            })
            .collect()
    }
}
