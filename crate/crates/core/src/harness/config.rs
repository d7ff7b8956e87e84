use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::schedule::CycleConfig;
use crate::stacking::{LossSource, WeightRule, WeightingSpec};

/// Default temperature grid; `1000` stands in for equal weighting.
pub const DEFAULT_TAU_GRID: [f64; 9] = [0.1, 0.3, 0.5, 0.9, 1.0, 2.0, 5.0, 10.0, 1000.0];

/// Seed offset for the held-out blob test sample.
pub const TEST_SEED_OFFSET: u64 = 0x7e57_0000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs {
        num_classes: usize,
        /// Training-pool size per class, before the validation split.
        per_class: usize,
        test_per_class: usize,
        dim: usize,
        spread: f64,
        /// Seed for centres and samples; the run seed when absent.
        #[serde(default)]
        data_seed: Option<u64>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        test_limit: Option<usize>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptureSpec {
    #[serde(default = "yes")]
    pub midpoints: bool,
    #[serde(default)]
    pub window_half_width: Option<usize>,
    /// Iterations from each minimum; negative values look before it.
    #[serde(default = "default_offsets")]
    pub offsets: Vec<i64>,
}

impl Default for CaptureSpec {
    fn default() -> Self {
        Self {
            midpoints: true,
            window_half_width: None,
            offsets: default_offsets(),
        }
    }
}

fn yes() -> bool {
    true
}

fn default_offsets() -> Vec<i64> {
    vec![10]
}

fn default_batch_size() -> usize {
    64
}

fn default_val_fraction() -> f64 {
    0.2
}

fn default_tau_grid() -> Vec<f64> {
    DEFAULT_TAU_GRID.to_vec()
}

fn default_independent() -> usize {
    5
}

fn default_weightings() -> Vec<WeightingSpec> {
    vec![
        WeightingSpec {
            rule: WeightRule::InverseLoss,
            source: LossSource::Train,
        },
        WeightingSpec {
            rule: WeightRule::Likelihood,
            source: LossSource::Train,
        },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub hidden_layers: Vec<usize>,
    pub schedule: CycleConfig,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub capture: CaptureSpec,
    #[serde(default = "default_tau_grid")]
    pub tau_grid: Vec<f64>,
    /// Largest ensemble in the size sweep; all completed cycles when absent.
    #[serde(default)]
    pub max_ensemble_size: Option<usize>,
    /// Members of the independently trained baseline ensemble.
    #[serde(default = "default_independent")]
    pub independent_members: usize,
    /// Additional fixed weightings reported by `compare` on the minima.
    #[serde(default = "default_weightings")]
    pub weightings: Vec<WeightingSpec>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Io(format!("reading config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let invalid = |msg: String| Err(HarnessError::Validation(msg));
        self.schedule
            .validate()
            .map_err(|e| HarnessError::Validation(e.to_string()))?;
        if self.schedule.is_degenerate() {
            log::warn!(
                "cycle_len {} < 4: midpoints collide with minima",
                self.schedule.cycle_len
            );
        }
        if self.hidden_layers.contains(&0) {
            return invalid("hidden layer sizes must be >= 1".into());
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return invalid(format!("val_fraction must be in (0, 1), got {}", self.val_fraction));
        }
        if self.tau_grid.is_empty() {
            return invalid("tau_grid must not be empty".into());
        }
        if let Some(t) = self.tau_grid.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return invalid(format!("temperatures must be positive, got {t}"));
        }
        let cycles = self.schedule.completed_cycles();
        if let Some(n) = self.max_ensemble_size {
            if n == 0 || n > cycles {
                return invalid(format!(
                    "max_ensemble_size must be in 1..={cycles} (completed cycles), got {n}"
                ));
            }
        }
        if self.independent_members == 0 {
            return invalid("independent_members must be >= 1".into());
        }
        for off in &self.capture.offsets {
            if off.unsigned_abs() >= self.schedule.cycle_len as u64 {
                return invalid(format!(
                    "offset {off} must be smaller than cycle_len {} in magnitude",
                    self.schedule.cycle_len
                ));
            }
        }
        if let Some(s) = self.capture.window_half_width {
            if s >= self.schedule.cycle_len {
                return invalid(format!(
                    "window_half_width {s} must be smaller than cycle_len {}",
                    self.schedule.cycle_len
                ));
            }
        }
        for w in &self.weightings {
            w.validate().map_err(|e| HarnessError::Validation(e.to_string()))?;
        }
        match &self.dataset {
            DatasetSpec::Blobs {
                num_classes,
                per_class,
                test_per_class,
                dim,
                spread,
                ..
            } => {
                if *num_classes < 2 || *dim < 2 || *per_class == 0 || *test_per_class == 0 {
                    return invalid("blobs need num_classes >= 2, dim >= 2 and non-empty samples".into());
                }
                if !(*spread > 0.0 && spread.is_finite()) {
                    return invalid(format!("blob spread must be positive, got {spread}"));
                }
            }
            DatasetSpec::Idx { limit, test_limit, .. } => {
                if *limit == Some(0) || *test_limit == Some(0) {
                    return invalid("IDX limits must be >= 1".into());
                }
            }
        }
        Ok(())
    }

    /// Ensemble sizes swept by default: `1..=max`.
    pub fn ensemble_sizes(&self) -> Vec<usize> {
        let max = self
            .max_ensemble_size
            .unwrap_or_else(|| self.schedule.completed_cycles());
        (1..=max).collect()
    }

    /// Desk-scale blobs setup: 3 classes, 600 train / 150 validation / 600
    /// test rows, one hidden layer of 32, five cycles of 200 iterations.
    pub fn blobs_default() -> Self {
        Self {
            dataset: DatasetSpec::Blobs {
                num_classes: 3,
                per_class: 250,
                test_per_class: 200,
                dim: 8,
                spread: 1.5,
                data_seed: None,
            },
            hidden_layers: vec![32],
            schedule: CycleConfig {
                alpha_min: 0.001,
                alpha_max: 0.05,
                cycle_len: 200,
                total_iters: 1000,
            },
            batch_size: default_batch_size(),
            seed: 0,
            val_fraction: default_val_fraction(),
            capture: CaptureSpec::default(),
            tau_grid: default_tau_grid(),
            max_ensemble_size: None,
            independent_members: default_independent(),
            weightings: default_weightings(),
        }
    }
}
