//! Datasets: seeded Gaussian blobs, IDX (MNIST-family) files, and seeded
//! train/validation splitting.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Dataset, NnError};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Blob centres are drawn uniformly from `[-CENTER_BOX, CENTER_BOX]^d`.
pub const CENTER_BOX: f64 = 2.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}: bad magic number 0x{found:08x} (expected 0x{expected:08x})")]
    BadMagic {
        file: String,
        expected: u32,
        found: u32,
    },
    #[error("{file}: truncated {what}: need {needed} bytes, have {available}")]
    Truncated {
        file: String,
        what: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("{file}: {extra} unexpected trailing bytes")]
    TrailingBytes { file: String, extra: usize },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Gaussian class clusters around seed-determined centres.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobGenerator {
    centers: Vec<Vec<f64>>,
    spread: f64,
}

impl BlobGenerator {
    pub fn new(num_classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Self, DataError> {
        if num_classes < 2 {
            return Err(DataError::InvalidArgument(format!("need >= 2 classes, got {num_classes}")));
        }
        if dim < 2 {
            return Err(DataError::InvalidArgument(format!("need dim >= 2, got {dim}")));
        }
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(DataError::InvalidArgument(format!("spread must be positive, got {spread}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = (0..num_classes)
            .map(|_| (0..dim).map(|_| rng.random_range(-CENTER_BOX..CENTER_BOX)).collect())
            .collect();
        Ok(Self { centers, spread })
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// `per_class` points for each class, rows shuffled.
    pub fn sample(&self, per_class: usize, seed: u64) -> Result<Dataset, DataError> {
        if per_class == 0 {
            return Err(DataError::InvalidArgument("per_class must be >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.centers.len();
        let mut order: Vec<usize> = (0..k * per_class).map(|i| i / per_class).collect();
        order.shuffle(&mut rng);
        let dim = self.centers[0].len();
        let mut features = Vec::with_capacity(order.len() * dim);
        for &class in &order {
            for &c in &self.centers[class] {
                let z: f64 = StandardNormal.sample(&mut rng);
                features.push(c + self.spread * z);
            }
        }
        Ok(Dataset::new(features, dim, order, k)?)
    }
}

/// `num_classes * per_class` points in `dim` dimensions; centres and noise
/// both come from `seed`.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset, DataError> {
    BlobGenerator::new(num_classes, dim, spread, seed)?.sample(per_class, seed)
}

fn be_u32(bytes: &[u8], at: usize, file: &str, what: &'static str) -> Result<u32, DataError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| DataError::Truncated {
            file: file.to_string(),
            what,
            needed: at + 4,
            available: bytes.len(),
        })
}

fn check_payload(bytes: &[u8], header: usize, payload: usize, file: &str) -> Result<(), DataError> {
    let needed = header
        .checked_add(payload)
        .ok_or_else(|| DataError::InvalidArgument(format!("{file}: declared size overflows")))?;
    if bytes.len() < needed {
        return Err(DataError::Truncated {
            file: file.to_string(),
            what: "payload",
            needed,
            available: bytes.len(),
        });
    }
    if bytes.len() > needed {
        return Err(DataError::TrailingBytes {
            file: file.to_string(),
            extra: bytes.len() - needed,
        });
    }
    Ok(())
}

/// Parsed IDX image file: `count` images of `rows * cols` bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8], file: &str) -> Result<IdxImages, DataError> {
    let magic = be_u32(bytes, 0, file, "magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            file: file.to_string(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, file, "image count")? as usize;
    let rows = be_u32(bytes, 8, file, "row count")? as usize;
    let cols = be_u32(bytes, 12, file, "column count")? as usize;
    let size = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| DataError::InvalidArgument(format!("{file}: declared size overflows")))?;
    check_payload(bytes, 16, size, file)?;
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8], file: &str) -> Result<Vec<u8>, DataError> {
    let magic = be_u32(bytes, 0, file, "magic")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            file: file.to_string(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, file, "label count")? as usize;
    check_payload(bytes, 8, count, file)?;
    Ok(bytes[8..].to_vec())
}

pub fn idx_image_bytes(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for v in [images.count, images.rows, images.cols] {
        out.extend_from_slice(&(v as u32).to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Builds a dataset from parsed IDX contents; pixels are scaled by `1/255`.
pub fn dataset_from_idx(
    images: &IdxImages,
    labels: &[u8],
    limit: Option<usize>,
) -> Result<Dataset, DataError> {
    if images.count != labels.len() {
        return Err(DataError::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let n = limit.map_or(images.count, |l| l.min(images.count));
    if n == 0 {
        return Err(DataError::InvalidArgument("IDX selection is empty".into()));
    }
    let dim = images.rows * images.cols;
    if dim == 0 {
        return Err(DataError::InvalidArgument("IDX images have zero pixels".into()));
    }
    let features = images.pixels[..n * dim]
        .iter()
        .map(|&p| f64::from(p) / 255.0)
        .collect();
    let labels: Vec<usize> = labels[..n].iter().map(|&l| usize::from(l)).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Ok(Dataset::new(features, dim, labels, num_classes)?)
}

fn read(path: &Path) -> Result<Vec<u8>, DataError> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads an IDX image/label pair, keeping at most `limit` rows.
///
/// The class count is the largest label seen plus one; use
/// [`Dataset::with_num_classes`] to align a train and a test subset.
pub fn load_idx(images_path: &Path, labels_path: &Path, limit: Option<usize>) -> Result<Dataset, DataError> {
    let images = parse_idx_images(&read(images_path)?, &images_path.display().to_string())?;
    let labels = parse_idx_labels(&read(labels_path)?, &labels_path.display().to_string())?;
    dataset_from_idx(&images, &labels, limit)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub seed: u64,
}

/// Seeded random partition into `⌈m(1-f)⌉` training rows and the rest for
/// validation.
pub fn split(data: &Dataset, spec: &SplitSpec) -> Result<(Dataset, Dataset), DataError> {
    let f = spec.val_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(DataError::InvalidArgument(format!("val_fraction must be in (0, 1), got {f}")));
    }
    let m = data.len();
    // The epsilon absorbs representation error in products like 100 * 0.8.
    let n_train = ((m as f64) * (1.0 - f) - 1e-9).ceil().max(0.0) as usize;
    let n_val = m - n_train.min(m);
    if n_val == 0 || n_val >= n_train {
        return Err(DataError::InvalidArgument(format!(
            "split of {m} rows at val_fraction {f} gives {n_train} train / {n_val} validation rows"
        )));
    }
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    Ok((data.subset(&idx[..n_train])?, data.subset(&idx[n_train..])?))
}
