//! Versioned binary parameter container.
//!
//! Layout (little endian): magic `DCKP`, format version `u32`, owner tag
//! `u8`, precision `u8` (32 or 64), 32-byte config hash, array count `u32`,
//! then per array: name length `u32`, UTF-8 name, rank `u32`, dims `u64`
//! each, values as `f32` or `f64`.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Owner, ParameterStore, Tensor};

const MAGIC: &[u8; 4] = b"DCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("unknown checkpoint format version {0}")]
    UnknownVersion(u32),
    #[error("truncated or corrupt checkpoint body: {0}")]
    Corrupt(String),
    #[error("checkpoint belongs to the {found}, expected the {expected}")]
    OwnerMismatch { expected: Owner, found: Owner },
    #[error("checkpoint config hash {found} does not match the current config {expected}")]
    ConfigMismatch { expected: String, found: String },
    #[error("array {name}: checkpoint shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("array {0} missing from checkpoint")]
    MissingArray(String),
    #[error("config could not be hashed: {0}")]
    Hash(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn tag(self) -> u8 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

/// SHA-256 of a config's canonical TOML rendering.
pub fn config_hash<T: Serialize>(config: &T) -> Result<[u8; 32], CheckpointError> {
    let text = toml::to_string(config).map_err(|e| CheckpointError::Hash(e.to_string()))?;
    Ok(Sha256::digest(text.as_bytes()).into())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointFile {
    pub version: u32,
    pub owner: Owner,
    pub precision: Precision,
    pub config_hash: [u8; 32],
    pub arrays: Vec<(String, Tensor)>,
}

impl fmt::Display for CheckpointFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "owner={}", self.owner)?;
        writeln!(f, "version={}", self.version)?;
        writeln!(f, "precision={}", self.precision.tag())?;
        writeln!(f, "config_hash={}", hex(&self.config_hash))?;
        writeln!(f, "arrays={}", self.arrays.len())?;
        for (name, t) in &self.arrays {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(f, "{name}\t[{}]", dims.join(", "))?;
        }
        Ok(())
    }
}

fn encode(store: &ParameterStore, hash: &[u8; 32], precision: Precision) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64 + 8 * store.num_values());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(store.owner().tag());
    buf.push(precision.tag());
    buf.extend_from_slice(hash);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.params() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            match precision {
                Precision::F32 => buf.extend_from_slice(&(v as f32).to_le_bytes()),
                Precision::F64 => buf.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    buf
}

pub fn save_checkpoint(store: &ParameterStore, hash: &[u8; 32], precision: Precision, path: &Path) -> Result<(), CheckpointError> {
    let bytes = encode(store, hash, precision);
    let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&bytes).map_err(io)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt(format!("unexpected end of file reading {what}")))?;
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn decode(data: &[u8]) -> Result<CheckpointFile, CheckpointError> {
    if data.len() < 4 + 4 + 2 + 32 + 4 || &data[..4] != MAGIC {
        return Err(CheckpointError::CorruptHeader("bad magic or short header".into()));
    }
    let mut c = Cursor { data, pos: 4 };
    let version = c.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnknownVersion(version));
    }
    let head = c.take(2, "header")?;
    let owner = Owner::from_tag(head[0]).ok_or_else(|| CheckpointError::CorruptHeader(format!("owner tag {}", head[0])))?;
    let precision = match head[1] {
        32 => Precision::F32,
        64 => Precision::F64,
        t => return Err(CheckpointError::CorruptHeader(format!("precision tag {t}"))),
    };
    let config_hash: [u8; 32] = c.take(32, "config hash")?.try_into().unwrap();
    let count = c.u32("array count")? as usize;
    let mut arrays = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| CheckpointError::Corrupt("array name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32("rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("array {name}: rank {rank}")));
        }
        let shape = (0..rank).map(|_| c.u64("dim").map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CheckpointError::Corrupt(format!("array {name}: size overflow")))?;
        let values: Vec<f64> = match precision {
            Precision::F32 => c
                .take(n.saturating_mul(4), &name)?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect(),
            Precision::F64 => c
                .take(n.saturating_mul(8), &name)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        };
        let t = Tensor::new(shape, values).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        arrays.push((name, t));
    }
    if c.pos != data.len() {
        return Err(CheckpointError::Corrupt(format!("{} trailing bytes", data.len() - c.pos)));
    }
    Ok(CheckpointFile {
        version,
        owner,
        precision,
        config_hash,
        arrays,
    })
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointFile, CheckpointError> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(&data)
}

/// What a load actually copied.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model arrays left untouched (forced loads only).
    pub skipped: Vec<String>,
    pub precision: Option<Precision>,
}

/// Copies checkpoint arrays into `store`.
///
/// Without `force`, the owner and config hash must match and every model
/// array must be present with its exact shape. With `force`, a hash
/// mismatch only warns, and arrays are copied where name and shape agree.
pub fn load_checkpoint(store: &mut ParameterStore, path: &Path, hash: &[u8; 32], force: bool) -> Result<LoadReport, CheckpointError> {
    let file = read_checkpoint(path)?;
    if file.owner != store.owner() {
        return Err(CheckpointError::OwnerMismatch {
            expected: store.owner(),
            found: file.owner,
        });
    }
    let hash_ok = &file.config_hash == hash;
    if !hash_ok && !force {
        return Err(CheckpointError::ConfigMismatch {
            expected: hex(hash),
            found: hex(&file.config_hash),
        });
    }
    if !hash_ok {
        log::warn!(
            "{}: config hash differs ({} vs {}); loading arrays that match by name and shape",
            path.display(),
            hex(&file.config_hash),
            hex(hash)
        );
    }
    let mut report = LoadReport {
        precision: Some(file.precision),
        ..Default::default()
    };
    let ids: Vec<_> = store.ids().collect();
    let mut plan = Vec::new();
    for id in ids {
        let name = store.get(id).name.clone();
        let expected = store.value(id).shape().to_vec();
        match file.arrays.iter().find(|(n, _)| *n == name) {
            Some((_, t)) if t.shape() == expected.as_slice() => plan.push((id, t)),
            Some((_, t)) if !force => {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected,
                    found: t.shape().to_vec(),
                })
            }
            None if !force => return Err(CheckpointError::MissingArray(name)),
            _ => {
                log::warn!("{}: skipping array {name}", path.display());
                report.skipped.push(name);
            }
        }
    }
    for (id, t) in plan {
        report.loaded.push(store.get(id).name.clone());
        *store.value_mut(id) = t.clone();
    }
    Ok(report)
}
