//! Binary snapshot-store format and its JSON sidecar.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic        8 bytes  "SNAPSTOR"
//! version      u32
//! run_id       u32 length + UTF-8 bytes
//! arch         u32 layer count, u64 per layer size, u8 activation (0 = relu)
//! schedule     f64 alpha_min, f64 alpha_max, u64 cycle_len, u64 total_iters
//! count        u64
//! snapshot*    u64 iter, u8 tag, f64 lr, f64 train_nll, f64 val_nll,
//!              u64 param count, f64 * param count
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Snapshot, SnapshotStore, SnapshotTag};
use crate::nn::{MlpArchitecture, ParamVector};
use crate::schedule::CycleConfig;

pub const MAGIC: &[u8; 8] = b"SNAPSTOR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not a snapshot store (bad magic bytes)")]
    BadMagic,
    #[error("unsupported store format version {found} (expected {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("store truncated while reading {what} at byte {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("snapshot {index} has {found} parameters, architecture needs {expected}")]
    ArchMismatch {
        index: usize,
        expected: usize,
        found: usize,
    },
    #[error("malformed store: {0}")]
    Malformed(String),
    #[error("malformed sidecar {path}: {source}")]
    Sidecar {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

/// Run metadata written next to a store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreMetadata {
    pub format_version: u32,
    pub run_id: String,
    pub seed: u64,
    pub batch_size: usize,
    pub layer_sizes: Vec<usize>,
    pub schedule: CycleConfig,
    pub snapshot_count: usize,
    pub train_fingerprint: String,
    pub val_fingerprint: String,
    /// Seconds since the Unix epoch; the only non-reproducible field.
    pub created_unix: u64,
}

pub fn store_bytes(store: &SnapshotStore) -> Vec<u8> {
    let params_total: usize = store.snapshots.iter().map(|s| s.params.len()).sum();
    let mut out = Vec::with_capacity(128 + params_total * 8 + store.len() * 48);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.run_id.len() as u32).to_le_bytes());
    out.extend_from_slice(store.run_id.as_bytes());
    let sizes = store.arch.layer_sizes();
    out.extend_from_slice(&(sizes.len() as u32).to_le_bytes());
    for &n in sizes {
        out.extend_from_slice(&(n as u64).to_le_bytes());
    }
    out.push(0);
    out.extend_from_slice(&store.cfg.alpha_min.to_le_bytes());
    out.extend_from_slice(&store.cfg.alpha_max.to_le_bytes());
    out.extend_from_slice(&(store.cfg.cycle_len as u64).to_le_bytes());
    out.extend_from_slice(&(store.cfg.total_iters as u64).to_le_bytes());
    out.extend_from_slice(&(store.snapshots.len() as u64).to_le_bytes());
    for s in &store.snapshots {
        out.extend_from_slice(&(s.iter as u64).to_le_bytes());
        out.push(s.tag.code());
        out.extend_from_slice(&s.lr_at_capture.to_le_bytes());
        out.extend_from_slice(&s.train_nll.to_le_bytes());
        out.extend_from_slice(&s.val_nll.to_le_bytes());
        out.extend_from_slice(&(s.params.len() as u64).to_le_bytes());
        for v in s.params.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], StoreError> {
        if self.bytes.len() - self.pos < n {
            return Err(StoreError::Truncated {
                what,
                offset: self.pos,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, StoreError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, StoreError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, StoreError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &'static str) -> Result<usize, StoreError> {
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| StoreError::Malformed(format!("{what} {v} does not fit in memory")))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, StoreError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    /// Rejects element counts the rest of the buffer cannot possibly hold.
    fn check_count(&self, count: usize, elem_size: usize, what: &'static str) -> Result<(), StoreError> {
        if count.checked_mul(elem_size).is_none_or(|n| n > self.remaining()) {
            return Err(StoreError::Truncated {
                what,
                offset: self.pos,
            });
        }
        Ok(())
    }
}

pub fn store_from_bytes(bytes: &[u8]) -> Result<SnapshotStore, StoreError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic").map_err(|_| StoreError::BadMagic)? != MAGIC {
        return Err(StoreError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(StoreError::UnsupportedVersion { found: version });
    }
    let id_len = r.u32("run id length")? as usize;
    let run_id = std::str::from_utf8(r.take(id_len, "run id")?)
        .map_err(|e| StoreError::Malformed(format!("run id is not UTF-8: {e}")))?
        .to_string();

    let n_layers = r.u32("layer count")? as usize;
    r.check_count(n_layers, 8, "layer sizes")?;
    let sizes = (0..n_layers)
        .map(|_| r.usize("layer size"))
        .collect::<Result<Vec<_>, _>>()?;
    let activation = r.u8("activation")?;
    if activation != 0 {
        return Err(StoreError::Malformed(format!("unknown activation code {activation}")));
    }
    let arch = MlpArchitecture::new(sizes).map_err(|e| StoreError::Malformed(e.to_string()))?;

    let cfg = CycleConfig {
        alpha_min: r.f64("alpha_min")?,
        alpha_max: r.f64("alpha_max")?,
        cycle_len: r.usize("cycle_len")?,
        total_iters: r.usize("total_iters")?,
    };
    cfg.validate().map_err(|e| StoreError::Malformed(e.to_string()))?;

    let count = r.usize("snapshot count")?;
    r.check_count(count, 45, "snapshots")?;
    let mut snapshots = Vec::with_capacity(count);
    for index in 0..count {
        let iter = r.usize("snapshot iteration")?;
        let code = r.u8("snapshot tag")?;
        let tag = SnapshotTag::from_code(code)
            .ok_or_else(|| StoreError::Malformed(format!("snapshot {index} has unknown tag {code}")))?;
        let lr_at_capture = r.f64("learning rate")?;
        let train_nll = r.f64("train nll")?;
        let val_nll = r.f64("validation nll")?;
        let n_params = r.usize("parameter count")?;
        if n_params != arch.param_count() {
            return Err(StoreError::ArchMismatch {
                index,
                expected: arch.param_count(),
                found: n_params,
            });
        }
        r.check_count(n_params, 8, "parameters")?;
        let values = (0..n_params)
            .map(|_| r.f64("parameter"))
            .collect::<Result<Vec<_>, _>>()?;
        let params = ParamVector::new(values, arch.clone())
            .map_err(|e| StoreError::Malformed(format!("snapshot {index}: {e}")))?;
        if iter >= cfg.total_iters {
            return Err(StoreError::Malformed(format!(
                "snapshot {index} at iteration {iter} beyond {} iterations",
                cfg.total_iters
            )));
        }
        if snapshots.last().is_some_and(|prev: &Snapshot| prev.iter >= iter) {
            return Err(StoreError::Malformed(format!(
                "snapshot {index} breaks increasing iteration order"
            )));
        }
        for (name, v) in [("train", train_nll), ("validation", val_nll)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(StoreError::Malformed(format!(
                    "snapshot {index} has invalid {name} nll {v}"
                )));
            }
        }
        snapshots.push(Snapshot {
            params,
            iter,
            lr_at_capture,
            train_nll,
            val_nll,
            tag,
        });
    }
    if r.remaining() != 0 {
        return Err(StoreError::Malformed(format!(
            "{} trailing bytes after last snapshot",
            r.remaining()
        )));
    }
    Ok(SnapshotStore {
        run_id,
        arch,
        cfg,
        snapshots,
    })
}

pub fn save_store(store: &SnapshotStore, path: &Path) -> Result<(), StoreError> {
    fs::write(path, store_bytes(store)).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_store(path: &Path) -> Result<SnapshotStore, StoreError> {
    let bytes = fs::read(path).map_err(|source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    store_from_bytes(&bytes)
}

/// Sidecar location for a store file: same path with a `.json` extension.
pub fn sidecar_path(store_path: &Path) -> PathBuf {
    store_path.with_extension("json")
}

pub fn save_sidecar(meta: &StoreMetadata, store_path: &Path) -> Result<(), StoreError> {
    let path = sidecar_path(store_path);
    let text = serde_json::to_string_pretty(meta).map_err(|source| StoreError::Sidecar {
        path: path.clone(),
        source,
    })?;
    fs::write(&path, text + "\n").map_err(|source| StoreError::Io { path, source })
}

pub fn load_sidecar(store_path: &Path) -> Result<StoreMetadata, StoreError> {
    let path = sidecar_path(store_path);
    let text = fs::read_to_string(&path).map_err(|source| StoreError::Io {
        path: path.clone(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| StoreError::Sidecar { path, source })
}
