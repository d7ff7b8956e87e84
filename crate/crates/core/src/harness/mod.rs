//! Experiment orchestration behind the `snapstack` CLI.

mod commands;
mod config;
mod report;

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::data::{self, BlobGenerator, DataError, SplitSpec};
use crate::nn::{Dataset, MlpArchitecture, NnError};
use crate::snapshots::{CapturePlan, SelectError, Snapshot, SnapshotStore, StoreError, TrainError, TrainSpec};
use crate::stacking::StackError;

pub use commands::{
    cmd_compare, cmd_sweep_offset, cmd_sweep_temperature, cmd_train, compare_markdown, csv_bytes,
    load_checked_store, write_csv, CompareOutput,
    CompareRow, OffsetRow, SweepRow, TrainOutput,
};
pub use config::{CaptureSpec, DatasetSpec, ExperimentConfig, DEFAULT_TAU_GRID, TEST_SEED_OFFSET};
pub use report::{cmd_report, CsvKind};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("validation error: {0}")]
    Validation(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl HarnessError {
    /// Process exit code: 1 validation, 2 runtime/training, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Validation(_) => 1,
            HarnessError::Training(_) => 2,
            HarnessError::Io(_) => 3,
        }
    }
}

impl From<DataError> for HarnessError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidArgument(_) | DataError::Nn(_) => HarnessError::Validation(e.to_string()),
            _ => HarnessError::Io(e.to_string()),
        }
    }
}

impl From<StoreError> for HarnessError {
    fn from(e: StoreError) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => HarnessError::Training(e.to_string()),
            _ => HarnessError::Validation(e.to_string()),
        }
    }
}

impl From<SelectError> for HarnessError {
    fn from(e: SelectError) -> Self {
        HarnessError::Validation(e.to_string())
    }
}

impl From<StackError> for HarnessError {
    fn from(e: StackError) -> Self {
        HarnessError::Training(e.to_string())
    }
}

impl From<NnError> for HarnessError {
    fn from(e: NnError) -> Self {
        HarnessError::Validation(e.to_string())
    }
}

impl From<csv::Error> for HarnessError {
    fn from(e: csv::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

/// Snapshot selection policy as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Policy {
    Min,
    Mid,
    MinMid,
    Window(usize),
    Offset(i64),
}

impl Policy {
    pub fn select<'s>(&self, store: &'s SnapshotStore) -> Result<Vec<&'s Snapshot>, SelectError> {
        match *self {
            Policy::Min => store.select_min(),
            Policy::Mid => store.select_mid(),
            Policy::MinMid => store.select_min_mid(),
            Policy::Window(s) => store.select_window(s),
            Policy::Offset(k) => store.select_offset(k),
        }
    }

    /// File-name friendly form, e.g. `offset-10`.
    pub fn slug(&self) -> String {
        self.to_string().replace([':', '+'], "-")
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Min => write!(f, "min"),
            Policy::Mid => write!(f, "mid"),
            Policy::MinMid => write!(f, "min+mid"),
            Policy::Window(s) => write!(f, "window:{s}"),
            Policy::Offset(k) => write!(f, "offset:{k}"),
        }
    }
}

impl FromStr for Policy {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || HarnessError::Validation(format!("unknown policy {s:?} (min, mid, min+mid, window:S, offset:K)"));
        match s {
            "min" => Ok(Policy::Min),
            "mid" => Ok(Policy::Mid),
            "min+mid" => Ok(Policy::MinMid),
            _ => {
                if let Some(v) = s.strip_prefix("window:") {
                    v.parse().map(Policy::Window).map_err(|_| bad())
                } else if let Some(v) = s.strip_prefix("offset:") {
                    v.parse().map(Policy::Offset).map_err(|_| bad())
                } else {
                    Err(bad())
                }
            }
        }
    }
}

/// A validated configuration with its data materialized.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub arch: MlpArchitecture,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Experiment {
    pub fn prepare(config: ExperimentConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let (pool, test) = match &config.dataset {
            DatasetSpec::Blobs {
                num_classes,
                per_class,
                test_per_class,
                dim,
                spread,
                data_seed,
            } => {
                let seed = data_seed.unwrap_or(config.seed);
                let generator = BlobGenerator::new(*num_classes, *dim, *spread, seed)?;
                (
                    generator.sample(*per_class, seed)?,
                    generator.sample(*test_per_class, seed.wrapping_add(TEST_SEED_OFFSET))?,
                )
            }
            DatasetSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                limit,
                test_limit,
            } => {
                let pool = data::load_idx(train_images, train_labels, *limit)?;
                let test = data::load_idx(test_images, test_labels, *test_limit)?;
                let k = pool.num_classes().max(test.num_classes());
                (pool.with_num_classes(k)?, test.with_num_classes(k)?)
            }
        };
        let (train, val) = data::split(
            &pool,
            &SplitSpec {
                val_fraction: config.val_fraction,
                seed: config.seed,
            },
        )?;
        let mut sizes = vec![train.dim()];
        sizes.extend(&config.hidden_layers);
        sizes.push(train.num_classes());
        let arch = MlpArchitecture::new(sizes)?;
        Ok(Self {
            config,
            arch,
            train,
            val,
            test,
        })
    }

    pub fn train_spec(&self, seed: u64) -> TrainSpec {
        TrainSpec {
            arch: self.arch.clone(),
            cycle: self.config.schedule,
            seed,
            batch_size: self.config.batch_size,
        }
    }

    /// Union of every configured policy's capture needs.
    pub fn capture_plan(&self) -> Result<CapturePlan, HarnessError> {
        let cfg = &self.config.schedule;
        let mut plan = CapturePlan::new().with_minima(cfg);
        if self.config.capture.midpoints {
            plan = plan.with_midpoints(cfg);
        }
        if let Some(s) = self.config.capture.window_half_width {
            plan = plan.with_window(cfg, s)?;
        }
        for &k in &self.config.capture.offsets {
            plan = plan.with_offset(cfg, k)?;
        }
        Ok(plan)
    }

    /// Rejects a store whose architecture or schedule differs from this
    /// experiment's.
    pub fn check_store(&self, store: &SnapshotStore) -> Result<(), HarnessError> {
        if store.arch != self.arch {
            return Err(HarnessError::Validation(format!(
                "store architecture {:?} does not match config {:?}",
                store.arch.layer_sizes(),
                self.arch.layer_sizes()
            )));
        }
        if store.cfg != self.config.schedule {
            return Err(HarnessError::Validation(
                "store schedule does not match config schedule".into(),
            ));
        }
        Ok(())
    }
}
