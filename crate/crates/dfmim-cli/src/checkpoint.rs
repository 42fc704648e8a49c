//! Binary model checkpoints.
//!
//! Layout: magic `DFMX`, format version (u32 LE), CRC-32 of the payload
//! (u32 LE), then the payload: the full model configuration, feature and
//! target statistics, and every parameter as a named little-endian f64
//! array with an explicit shape header. Arrays are stored in canonical
//! parameter order, so saving a loaded model reproduces the file byte
//! for byte.

use std::path::Path;

use dfmim_core::model::{ModelError, Task};
use dfmim_core::{DfmimConfig, DfmimModel, Tensor};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"DFMX";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {got} is not supported (this build reads {FORMAT_VERSION})")]
    VersionMismatch { got: u32 },
    #[error("checkpoint does not fit the model: {0}")]
    Model(#[from] ModelError),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Self { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn usize32(&mut self, v: usize) {
        debug_assert!(v <= u32::MAX as usize);
        self.u32(v as u32);
    }

    fn str(&mut self, s: &str) {
        self.usize32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn widths(&mut self, v: &[usize]) {
        self.usize32(v.len());
        for &w in v {
            self.usize32(w);
        }
    }

    fn f64s(&mut self, v: &[f64]) {
        self.usize32(v.len());
        for &x in v {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| corrupt(format!("truncated while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, what: &str) -> Result<f64, CheckpointError> {
        let b = self.take(8, what)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, CheckpointError> {
        let n = self.u32(what)? as usize;
        // An honest length never exceeds the bytes that remain.
        if n > self.buf.len() {
            return Err(corrupt(format!("implausible length {n} for {what}")));
        }
        Ok(n)
    }

    fn str(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.len(what)?;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| corrupt(format!("{what} is not UTF-8")))
    }

    fn widths(&mut self, what: &str) -> Result<Vec<usize>, CheckpointError> {
        let n = self.len(what)?;
        (0..n).map(|_| Ok(self.u32(what)? as usize)).collect()
    }

    fn f64s(&mut self, what: &str) -> Result<Vec<f64>, CheckpointError> {
        let n = self.len(what)?;
        if n.checked_mul(8).map(|b| self.pos + b > self.buf.len()).unwrap_or(true) {
            return Err(corrupt(format!("truncated while reading {what}")));
        }
        (0..n).map(|_| self.f64(what)).collect()
    }

    fn done(&self) -> Result<(), CheckpointError> {
        if self.pos != self.buf.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after the last array",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

const FLAG_PE: u8 = 1;
const FLAG_NORM: u8 = 1 << 1;
const FLAG_STD_TARGETS: u8 = 1 << 2;

fn encode_config(w: &mut Writer, cfg: &DfmimConfig) {
    w.usize32(cfg.p);
    w.usize32(cfg.k);
    w.usize32(cfg.c);
    w.usize32(cfg.n_grid);
    w.usize32(cfg.n_enc);
    w.usize32(cfg.heads);
    w.usize32(cfg.ff_dim);
    w.usize32(cfg.batch_size);
    w.usize32(cfg.epochs);
    w.f64(cfg.dropout);
    w.f64(cfg.lr);
    w.f64(cfg.focal_gamma);
    w.f64(cfg.basis_l2);
    w.u64(cfg.seed);
    w.u8(match cfg.task {
        Task::Regression => 0,
        Task::Classification => 1,
    });
    let mut flags = 0u8;
    if cfg.positional_encoding {
        flags |= FLAG_PE;
    }
    if cfg.normalize_features {
        flags |= FLAG_NORM;
    }
    if cfg.standardize_targets {
        flags |= FLAG_STD_TARGETS;
    }
    w.u8(flags);
    w.widths(&cfg.basis_hidden);
    w.widths(&cfg.head_hidden);
}

fn decode_config(r: &mut Reader) -> Result<DfmimConfig, CheckpointError> {
    let p = r.u32("config.p")? as usize;
    let k = r.u32("config.K")? as usize;
    let c = r.u32("config.C")? as usize;
    let n_grid = r.u32("config.n_grid")? as usize;
    let n_enc = r.u32("config.N_enc")? as usize;
    let heads = r.u32("config.heads")? as usize;
    let ff_dim = r.u32("config.ff_dim")? as usize;
    let batch_size = r.u32("config.batch_size")? as usize;
    let epochs = r.u32("config.epochs")? as usize;
    let dropout = r.f64("config.dropout")?;
    let lr = r.f64("config.lr")?;
    let focal_gamma = r.f64("config.focal_gamma")?;
    let basis_l2 = r.f64("config.basis_l2")?;
    let seed = r.u64("config.seed")?;
    let task = match r.u8("config.task")? {
        0 => Task::Regression,
        1 => Task::Classification,
        other => return Err(corrupt(format!("unknown task tag {other}"))),
    };
    let flags = r.u8("config.flags")?;
    let basis_hidden = r.widths("config.basis_hidden")?;
    let head_hidden = r.widths("config.head_hidden")?;
    Ok(DfmimConfig {
        p,
        k,
        c,
        n_grid,
        n_enc,
        heads,
        ff_dim,
        dropout,
        lr,
        batch_size,
        epochs,
        focal_gamma,
        basis_l2,
        seed,
        task,
        basis_hidden,
        head_hidden,
        positional_encoding: flags & FLAG_PE != 0,
        normalize_features: flags & FLAG_NORM != 0,
        standardize_targets: flags & FLAG_STD_TARGETS != 0,
    })
}

pub(crate) fn encode(
    cfg: &DfmimConfig,
    norm_mean: &[f64],
    norm_std: &[f64],
    target_mean: f64,
    target_std: f64,
    arrays: &[(String, Tensor)],
) -> Vec<u8> {
    let mut w = Writer::new();
    encode_config(&mut w, cfg);
    w.f64s(norm_mean);
    w.f64s(norm_std);
    w.f64(target_mean);
    w.f64(target_std);
    w.usize32(arrays.len());
    for (name, t) in arrays {
        w.str(name);
        w.widths(t.shape());
        for &v in t.data() {
            w.f64(v);
        }
    }
    let payload = w.buf;
    let mut out = Vec::with_capacity(payload.len() + 12);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Serializes the full model state.
pub fn save_model(model: &DfmimModel, path: &Path) -> Result<(), CheckpointError> {
    let (mean, std) = model.norm_stats();
    let (t_mean, t_std) = model.target_stats();
    let arrays: Vec<(String, Tensor)> = model
        .param_names()
        .iter()
        .cloned()
        .zip(model.params().iter().cloned())
        .collect();
    let bytes = encode(model.config(), mean, std, t_mean, t_std, &arrays);
    std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Reads a checkpoint back into a model. The file's configuration is
/// authoritative; arrays must match it in name and shape.
pub fn load_model(path: &Path) -> Result<DfmimModel, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<DfmimModel, CheckpointError> {
    if bytes.len() < 12 {
        return Err(corrupt(format!("{} bytes is too short for a header", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(corrupt("bad magic, not a checkpoint file".to_string()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch { got: version });
    }
    let stored_crc = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let payload = &bytes[12..];
    let actual_crc = crc32fast::hash(payload);
    if stored_crc != actual_crc {
        return Err(corrupt(format!(
            "checksum mismatch: stored {stored_crc:#010x}, computed {actual_crc:#010x}"
        )));
    }

    let mut r = Reader::new(payload);
    let cfg = decode_config(&mut r)?;
    let norm_mean = r.f64s("norm.mean")?;
    let norm_std = r.f64s("norm.std")?;
    let target_mean = r.f64("target.mean")?;
    let target_std = r.f64("target.std")?;
    let n_arrays = r.len("array count")?;

    let mut model = DfmimModel::init(cfg)?;
    if n_arrays != model.params().len() {
        return Err(corrupt(format!(
            "checkpoint holds {n_arrays} arrays but this configuration has {} parameters",
            model.params().len()
        )));
    }
    for _ in 0..n_arrays {
        let name = r.str("array name")?;
        let shape = r.widths("array shape")?;
        let count: usize = shape.iter().product();
        if count > payload.len() {
            return Err(corrupt(format!("implausible array shape {shape:?} for {name}")));
        }
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            data.push(r.f64("array data")?);
        }
        let tensor = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        model.set_param(&name, tensor)?;
    }
    r.done()?;
    model.set_norm_stats(norm_mean, norm_std)?;
    model.set_target_stats(target_mean, target_std)?;
    Ok(model)
}
