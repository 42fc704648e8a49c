//! On-disk format for simulated datasets.
//!
//! Same framing as checkpoints (magic, version u32 LE, CRC-32 of the
//! payload) with magic `DFSD`. The payload stores the scenario, the
//! generation seed, the grid, every sample's channel curves, and both
//! response vectors, all little-endian f64. Writing is deterministic, so
//! regenerating with the same seed reproduces the file exactly.

use std::path::Path;

use dfmim_core::sim::{Scenario, SimDataset};
use dfmim_core::{Curve, Grid, MultiCurve};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DFSD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot access dataset {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("dataset format version {got} is not supported (this build reads {FORMAT_VERSION})")]
    VersionMismatch { got: u32 },
}

fn corrupt(msg: impl Into<String>) -> DatasetError {
    DatasetError::Corrupt(msg.into())
}

pub fn save_dataset(data: &SimDataset, path: &Path) -> Result<(), DatasetError> {
    let bytes = encode(data)?;
    std::fs::write(path, bytes).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_dataset(path: &Path) -> Result<SimDataset, DatasetError> {
    let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

pub(crate) fn encode(data: &SimDataset) -> Result<Vec<u8>, DatasetError> {
    let n = data.len();
    if n == 0 {
        return Err(corrupt("refusing to write an empty dataset".to_string()));
    }
    let p = data.x[0].p();
    let n_grid = data.x[0].grid().n();
    let mut payload = Vec::new();
    payload.push(match data.scenario {
        Scenario::S1 => 1u8,
        Scenario::S2 => 2,
        Scenario::S3 => 3,
    });
    payload.extend_from_slice(&data.seed.to_le_bytes());
    payload.extend_from_slice(&(n as u32).to_le_bytes());
    payload.extend_from_slice(&(p as u32).to_le_bytes());
    payload.extend_from_slice(&(n_grid as u32).to_le_bytes());
    for sample in &data.x {
        if sample.p() != p || sample.grid().n() != n_grid {
            return Err(corrupt("samples disagree on channel count or grid".to_string()));
        }
        for curve in sample.channels() {
            for &v in curve.values() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for &v in &data.y {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    for &v in &data.y_clean {
        payload.extend_from_slice(&v.to_le_bytes());
    }

    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<SimDataset, DatasetError> {
    if bytes.len() < 12 {
        return Err(corrupt(format!("{} bytes is too short for a header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(corrupt("bad magic, not a dataset file".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(DatasetError::VersionMismatch { got: version });
    }
    let stored_crc = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let payload = &bytes[12..];
    if stored_crc != crc32fast::hash(payload) {
        return Err(corrupt("checksum mismatch".to_string()));
    }

    let head = 1 + 8 + 4 + 4 + 4;
    if payload.len() < head {
        return Err(corrupt("truncated header".to_string()));
    }
    let scenario = match payload[0] {
        1 => Scenario::S1,
        2 => Scenario::S2,
        3 => Scenario::S3,
        other => return Err(corrupt(format!("unknown scenario tag {other}"))),
    };
    let seed = u64::from_le_bytes(payload[1..9].try_into().expect("8 bytes"));
    let n = u32::from_le_bytes(payload[9..13].try_into().expect("4 bytes")) as usize;
    let p = u32::from_le_bytes(payload[13..17].try_into().expect("4 bytes")) as usize;
    let n_grid = u32::from_le_bytes(payload[17..21].try_into().expect("4 bytes")) as usize;
    if n == 0 || p == 0 || n_grid < 2 {
        return Err(corrupt(format!("implausible dimensions n={n} p={p} n_grid={n_grid}")));
    }
    let want = head + 8 * (n * p * n_grid + 2 * n);
    if payload.len() != want {
        return Err(corrupt(format!(
            "payload holds {} bytes, dimensions require {want}",
            payload.len()
        )));
    }

    let grid = Grid::new(n_grid).map_err(|e| corrupt(e.to_string()))?;
    let mut pos = head;
    let mut next = |_: usize| {
        let v = f64::from_le_bytes(payload[pos..pos + 8].try_into().expect("8 bytes"));
        pos += 8;
        v
    };
    let mut x = Vec::with_capacity(n);
    for _ in 0..n {
        let channels = (0..p)
            .map(|_| {
                let values: Vec<f64> = (0..n_grid).map(&mut next).collect();
                Curve::new(grid.clone(), values).map_err(|e| corrupt(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        x.push(MultiCurve::new(channels).map_err(|e| corrupt(e.to_string()))?);
    }
    let y: Vec<f64> = (0..n).map(&mut next).collect();
    let y_clean: Vec<f64> = (0..n).map(&mut next).collect();
    debug_assert_eq!(pos, payload.len());

    Ok(SimDataset {
        scenario,
        x,
        y,
        y_clean,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dfmim_core::sim::make_scenario_dataset;

    #[test]
    fn round_trip_preserves_everything_and_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let data = make_scenario_dataset(Scenario::S2, 7, 42).unwrap();
        let a = dir.path().join("a.dfsd");
        let b = dir.path().join("b.dfsd");
        save_dataset(&data, &a).unwrap();
        let loaded = load_dataset(&a).unwrap();
        assert_eq!(loaded.scenario, data.scenario);
        assert_eq!(loaded.seed, data.seed);
        assert_eq!(loaded.y, data.y);
        assert_eq!(loaded.y_clean, data.y_clean);
        assert_eq!(loaded.x.len(), data.x.len());
        for (l, d) in loaded.x.iter().zip(&data.x) {
            for (lc, dc) in l.channels().iter().zip(d.channels()) {
                assert_eq!(lc.values(), dc.values());
            }
        }
        save_dataset(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let data = make_scenario_dataset(Scenario::S1, 3, 1).unwrap();
        let bytes = encode(&data).unwrap();
        assert!(matches!(decode(&bytes[..20]), Err(DatasetError::Corrupt(_))));
        let mut flipped = bytes.clone();
        let last = flipped.len() - 1;
        flipped[last] ^= 0x40;
        assert!(matches!(decode(&flipped), Err(DatasetError::Corrupt(_))));
        let mut versioned = bytes;
        versioned[4..8].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            decode(&versioned),
            Err(DatasetError::VersionMismatch { got: 9 })
        ));
    }
}
