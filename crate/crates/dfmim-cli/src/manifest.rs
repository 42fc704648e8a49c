//! Utterance manifests and speaker-wise cross-validation folds.
//!
//! A manifest is a CSV with the exact header `path,speaker,session,label`.
//! Folds are built per speaker: each speaker is the test set once, the
//! next speaker in sorted order validates, everyone else trains.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("manifest parse error: {0}")]
    Parse(String),
    #[error("manifest must have header path,speaker,session,label; got {0}")]
    Header(String),
    #[error("manifest row {row}: {problem}")]
    Row { row: usize, problem: String },
    #[error("speaker-fold split needs at least 3 distinct speakers, got {0}")]
    TooFewSpeakers(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Deserialize)]
pub struct Utterance {
    pub path: PathBuf,
    pub speaker: String,
    pub session: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    rows: Vec<Utterance>,
}

const HEADER: [&str; 4] = ["path", "speaker", "session", "label"];

impl Manifest {
    pub fn from_rows(rows: Vec<Utterance>) -> Result<Self, ManifestError> {
        let mut seen = BTreeSet::new();
        for (i, row) in rows.iter().enumerate() {
            let row_no = i + 2; // header is line 1
            if row.path.as_os_str().is_empty() {
                return Err(ManifestError::Row {
                    row: row_no,
                    problem: "empty path".into(),
                });
            }
            if row.speaker.is_empty() {
                return Err(ManifestError::Row {
                    row: row_no,
                    problem: "empty speaker".into(),
                });
            }
            if row.label.is_empty() {
                return Err(ManifestError::Row {
                    row: row_no,
                    problem: "empty label".into(),
                });
            }
            if !seen.insert(row.path.clone()) {
                return Err(ManifestError::Row {
                    row: row_no,
                    problem: format!("duplicate path {}", row.path.display()),
                });
            }
        }
        Ok(Self { rows })
    }

    pub fn read(path: &Path) -> Result<Self, ManifestError> {
        let file = std::fs::File::open(path).map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(file);
        let headers = reader
            .headers()
            .map_err(|e| ManifestError::Parse(e.to_string()))?
            .clone();
        let got: Vec<&str> = headers.iter().collect();
        if got != HEADER {
            return Err(ManifestError::Header(got.join(",")));
        }
        let mut rows = Vec::new();
        for record in reader.deserialize::<Utterance>() {
            rows.push(record.map_err(|e| ManifestError::Parse(e.to_string()))?);
        }
        Self::from_rows(rows)
    }

    /// Writes the manifest back out with the canonical header. Paths are
    /// written as given (no normalization), so the file round-trips.
    pub fn write(&self, path: &Path) -> Result<(), ManifestError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| ManifestError::Parse(e.to_string()))?;
        w.write_record(HEADER)
            .map_err(|e| ManifestError::Parse(e.to_string()))?;
        for row in &self.rows {
            let path = row.path.display().to_string();
            w.write_record([
                path.as_str(),
                row.speaker.as_str(),
                row.session.as_str(),
                row.label.as_str(),
            ])
            .map_err(|e| ManifestError::Parse(e.to_string()))?;
        }
        w.flush().map_err(|source| ManifestError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn rows(&self) -> &[Utterance] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn speakers(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.speaker.clone()).collect()
    }

    pub fn labels(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.label.clone()).collect()
    }
}

/// One leave-one-speaker-out split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub test: String,
    pub val: String,
    pub train: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    folds: Vec<Fold>,
}

impl FoldPlan {
    /// One fold per speaker, speakers in sorted order. Fold i tests on
    /// speaker i and validates on speaker i+1 (wrapping), so with fewer
    /// than 3 speakers some role would have no training data.
    pub fn build(speakers: &BTreeSet<String>) -> Result<Self, ManifestError> {
        if speakers.len() < 3 {
            return Err(ManifestError::TooFewSpeakers(speakers.len()));
        }
        let ordered: Vec<&String> = speakers.iter().collect();
        let n = ordered.len();
        let folds = (0..n)
            .map(|i| {
                let test = ordered[i].clone();
                let val = ordered[(i + 1) % n].clone();
                let train = ordered
                    .iter()
                    .filter(|s| ***s != test && ***s != val)
                    .map(|s| (*s).clone())
                    .collect();
                Fold { test, val, train }
            })
            .collect();
        Ok(Self { folds })
    }

    pub fn folds(&self) -> &[Fold] {
        &self.folds
    }

    pub fn len(&self) -> usize {
        self.folds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.folds.is_empty()
    }
}
