use sha2::{Digest, Sha256};

use super::NnError;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    dim: usize,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f64>,
        dim: usize,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, NnError> {
        if dim == 0 {
            return Err(NnError::InvalidDataset("feature dimension must be >= 1".into()));
        }
        if labels.is_empty() {
            return Err(NnError::InvalidDataset("dataset has no examples".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(NnError::InvalidDataset(format!(
                "{} feature values do not form {} rows of width {}",
                features.len(),
                labels.len(),
                dim
            )));
        }
        if num_classes == 0 {
            return Err(NnError::InvalidDataset("num_classes must be >= 1".into()));
        }
        if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(NnError::InvalidDataset(format!(
                "label {label} at row {row} is not below num_classes {num_classes}"
            )));
        }
        if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
            return Err(NnError::InvalidDataset(format!(
                "non-finite feature at row {} column {}",
                pos / dim,
                pos % dim
            )));
        }
        Ok(Self {
            features,
            dim,
            labels,
            num_classes,
        })
    }

    pub fn from_rows(
        rows: &[Vec<f64>],
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, NnError> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(NnError::InvalidDataset("rows have different widths".into()));
        }
        if rows.len() != labels.len() {
            return Err(NnError::InvalidDataset(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        Self::new(rows.concat(), dim, labels, num_classes)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    /// Always false for a constructed dataset; kept for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Copies the given rows, in the given order, into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, NnError> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(NnError::InvalidDataset(format!(
                    "row index {i} out of range for {} rows",
                    self.len()
                )));
            }
            features.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        Self::new(features, self.dim, labels, self.num_classes)
    }

    /// Widens the class count, e.g. so a train subset and a test subset agree.
    pub fn with_num_classes(self, num_classes: usize) -> Result<Self, NnError> {
        Self::new(self.features, self.dim, self.labels, num_classes)
    }

    /// SHA-256 over the shape header, little-endian feature bits and labels.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.len() as u64).to_le_bytes());
        hasher.update((self.dim as u64).to_le_bytes());
        hasher.update((self.num_classes as u64).to_le_bytes());
        for v in &self.features {
            hasher.update(v.to_le_bytes());
        }
        for &l in &self.labels {
            hasher.update((l as u64).to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}
