//! Capturing models along one cyclical-LR training run and selecting
//! ensemble members from them.
//!
//! Selection policies:
//!
//! - `min`: the model at the end of every cycle (lowest learning rate).
//! - `mid`: the model where the decaying learning rate first reaches the
//!   middle of its range.
//! - `window(s)`: among the `2s + 1` models centred on each minimum, the one
//!   with the lowest validation NLL.
//! - `offset(k)`: the model `k` iterations after (or before) each minimum.

mod io;

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Dataset, MlpArchitecture, NnError, ParamVector, Workspace};
use crate::schedule::{CycleConfig, ScheduleError};

pub use io::{
    load_sidecar, load_store, save_sidecar, save_store, sidecar_path, store_bytes,
    store_from_bytes, StoreError, StoreMetadata, FORMAT_VERSION, MAGIC,
};

/// Seed-stream separation between initialization and batch shuffling.
const SHUFFLE_STREAM: u64 = 0x5348_5546_464c_4521;

/// Why a snapshot was captured. When several policies want the same
/// iteration the earlier variant wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnapshotTag {
    Min,
    Mid,
    Window,
    Offset,
}

impl SnapshotTag {
    pub fn code(self) -> u8 {
        match self {
            SnapshotTag::Min => 0,
            SnapshotTag::Mid => 1,
            SnapshotTag::Window => 2,
            SnapshotTag::Offset => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(SnapshotTag::Min),
            1 => Some(SnapshotTag::Mid),
            2 => Some(SnapshotTag::Window),
            3 => Some(SnapshotTag::Offset),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub params: ParamVector,
    pub iter: usize,
    pub lr_at_capture: f64,
    pub train_nll: f64,
    pub val_nll: f64,
    pub tag: SnapshotTag,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("no snapshots available for policy {0}")]
    EmptySelection(String),
    #[error("offset {steps} must be smaller than the cycle length {cycle_len} in magnitude")]
    OffsetOutOfRange { steps: i64, cycle_len: usize },
    #[error("window half-width {half_width} must be smaller than the cycle length {cycle_len}")]
    WindowTooWide { half_width: usize, cycle_len: usize },
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at iteration {iter}: {source}")]
    Diverged {
        iter: usize,
        #[source]
        source: NnError,
    },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("batch size must be >= 1")]
    ZeroBatch,
}

/// Iterations to capture, each with its tag.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CapturePlan {
    entries: BTreeMap<usize, SnapshotTag>,
}

impl CapturePlan {
    pub fn new() -> Self {
        Self::default()
    }

    /// Plan from bare iteration indices. Minima and midpoints of `cfg` are
    /// tagged as such, everything else as `Offset`.
    pub fn from_iters(cfg: &CycleConfig, iters: impl IntoIterator<Item = usize>) -> Self {
        let minima = cfg.cycle_minima();
        let mids = cfg.cycle_midpoints();
        let mut plan = Self::new();
        for t in iters {
            let tag = if minima.contains(&t) {
                SnapshotTag::Min
            } else if mids.contains(&t) {
                SnapshotTag::Mid
            } else {
                SnapshotTag::Offset
            };
            plan.insert(t, tag);
        }
        plan
    }

    pub fn insert(&mut self, iter: usize, tag: SnapshotTag) {
        self.entries
            .entry(iter)
            .and_modify(|t| *t = (*t).min(tag))
            .or_insert(tag);
    }

    pub fn with_minima(mut self, cfg: &CycleConfig) -> Self {
        for t in cfg.cycle_minima() {
            self.insert(t, SnapshotTag::Min);
        }
        self
    }

    pub fn with_midpoints(mut self, cfg: &CycleConfig) -> Self {
        for t in cfg.cycle_midpoints() {
            self.insert(t, SnapshotTag::Mid);
        }
        self
    }

    /// Every iteration within `half_width` of a cycle minimum.
    pub fn with_window(mut self, cfg: &CycleConfig, half_width: usize) -> Result<Self, SelectError> {
        if half_width >= cfg.cycle_len {
            return Err(SelectError::WindowTooWide {
                half_width,
                cycle_len: cfg.cycle_len,
            });
        }
        for m in cfg.cycle_minima() {
            for t in m - half_width..=m + half_width {
                if t < cfg.total_iters {
                    self.insert(t, SnapshotTag::Window);
                }
            }
        }
        self.insert_minima_tags(cfg);
        Ok(self)
    }

    pub fn with_offset(mut self, cfg: &CycleConfig, steps: i64) -> Result<Self, SelectError> {
        check_offset(cfg, steps)?;
        for m in cfg.cycle_minima() {
            let t = (m as i64 + steps) as usize;
            if t < cfg.total_iters {
                self.insert(t, SnapshotTag::Offset);
            }
        }
        self.insert_minima_tags(cfg);
        Ok(self)
    }

    fn insert_minima_tags(&mut self, cfg: &CycleConfig) {
        for t in cfg.cycle_minima() {
            if let Some(tag) = self.entries.get_mut(&t) {
                *tag = SnapshotTag::Min;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tag_at(&self, iter: usize) -> Option<SnapshotTag> {
        self.entries.get(&iter).copied()
    }

    pub fn iters(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }
}

fn check_offset(cfg: &CycleConfig, steps: i64) -> Result<(), SelectError> {
    if steps.unsigned_abs() >= cfg.cycle_len as u64 {
        return Err(SelectError::OffsetOutOfRange {
            steps,
            cycle_len: cfg.cycle_len,
        });
    }
    Ok(())
}

/// Everything that determines a training run besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub arch: MlpArchitecture,
    pub cycle: CycleConfig,
    pub seed: u64,
    pub batch_size: usize,
}

/// Result of one training run.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub store: SnapshotStore,
    pub final_params: ParamVector,
    /// SGD updates performed; always `cycle.total_iters`.
    pub sgd_steps: usize,
}

/// Runs SGD under the cyclical schedule and captures the planned snapshots.
///
/// The snapshot at iteration `t` holds the parameters after the update that
/// used `lr_at(t)`. Mini-batches come from a per-epoch shuffle seeded by the
/// run seed, so the result is a pure function of the inputs.
pub fn train_with_capture(
    spec: &TrainSpec,
    train: &Dataset,
    val: &Dataset,
    plan: &CapturePlan,
) -> Result<TrainedRun, TrainError> {
    spec.cycle.validate()?;
    spec.arch.validate()?;
    spec.arch.check_dataset(train)?;
    spec.arch.check_dataset(val)?;
    if spec.batch_size == 0 {
        return Err(TrainError::ZeroBatch);
    }

    let mut params = nn::init_params(&spec.arch, spec.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = order.len();
    let mut ws = Workspace::new(&spec.arch);
    let mut grad = vec![0.0; spec.arch.param_count()];
    let mut snapshots = Vec::with_capacity(plan.len());
    let batch = spec.batch_size.min(train.len());

    for t in 0..spec.cycle.total_iters {
        if cursor >= order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + batch).min(order.len());
        nn::gradient_into(&mut ws, &params, train, &order[cursor..end], &mut grad);
        cursor = end;

        let lr = spec.cycle.lr_at(t)?;
        nn::sgd_update(&mut params, &grad, lr).map_err(|source| TrainError::Diverged { iter: t, source })?;

        if let Some(tag) = plan.tag_at(t) {
            let train_nll = nn::nll_loss(&params, train)?;
            let val_nll = nn::nll_loss(&params, val)?;
            snapshots.push(Snapshot {
                params: params.clone(),
                iter: t,
                lr_at_capture: lr,
                train_nll,
                val_nll,
                tag,
            });
        }
    }

    let run_id = format!(
        "run-{:016x}-{}",
        spec.seed,
        &train.fingerprint()[..12]
    );
    Ok(TrainedRun {
        store: SnapshotStore {
            run_id,
            arch: spec.arch.clone(),
            cfg: spec.cycle,
            snapshots,
        },
        final_params: params,
        sgd_steps: spec.cycle.total_iters,
    })
}

/// Snapshots of one training run, in increasing iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotStore {
    pub run_id: String,
    pub arch: MlpArchitecture,
    pub cfg: CycleConfig,
    pub snapshots: Vec<Snapshot>,
}

impl SnapshotStore {
    pub fn len(&self) -> usize {
        self.snapshots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.snapshots.is_empty()
    }

    pub fn get(&self, iter: usize) -> Option<&Snapshot> {
        self.snapshots
            .binary_search_by_key(&iter, |s| s.iter)
            .ok()
            .map(|i| &self.snapshots[i])
    }

    fn by_tag(&self, tag: SnapshotTag) -> Vec<&Snapshot> {
        self.snapshots.iter().filter(|s| s.tag == tag).collect()
    }

    pub fn select_min(&self) -> Result<Vec<&Snapshot>, SelectError> {
        non_empty(self.by_tag(SnapshotTag::Min), "min")
    }

    pub fn select_mid(&self) -> Result<Vec<&Snapshot>, SelectError> {
        non_empty(self.by_tag(SnapshotTag::Mid), "mid")
    }

    /// Minima and midpoints together, in trajectory order.
    pub fn select_min_mid(&self) -> Result<Vec<&Snapshot>, SelectError> {
        let picked = self
            .snapshots
            .iter()
            .filter(|s| matches!(s.tag, SnapshotTag::Min | SnapshotTag::Mid))
            .collect();
        non_empty(picked, "min+mid")
    }

    /// Per cycle, the lowest-`val_nll` snapshot among the `2s + 1` around its
    /// minimum; ties go to the earliest iteration. Cycles whose window is not
    /// fully stored are skipped.
    pub fn select_window(&self, half_width: usize) -> Result<Vec<&Snapshot>, SelectError> {
        if half_width >= self.cfg.cycle_len {
            return Err(SelectError::WindowTooWide {
                half_width,
                cycle_len: self.cfg.cycle_len,
            });
        }
        let mut picked = Vec::new();
        for m in self.cfg.cycle_minima() {
            let candidates: Option<Vec<&Snapshot>> = (m - half_width..=m + half_width)
                .map(|t| self.get(t))
                .collect();
            let Some(candidates) = candidates else {
                warn!("window of half-width {half_width} around iteration {m} is incomplete; skipping cycle");
                continue;
            };
            let best = candidates
                .into_iter()
                .reduce(|best, s| if s.val_nll < best.val_nll { s } else { best })
                .expect("window has 2s + 1 >= 1 candidates");
            picked.push(best);
        }
        non_empty(picked, &format!("window(s={half_width})"))
    }

    /// Per cycle, the snapshot exactly `steps` iterations from its minimum.
    pub fn select_offset(&self, steps: i64) -> Result<Vec<&Snapshot>, SelectError> {
        check_offset(&self.cfg, steps)?;
        let mut picked = Vec::new();
        for m in self.cfg.cycle_minima() {
            let t = (m as i64 + steps) as usize;
            if t >= self.cfg.total_iters {
                warn!("offset {steps} from minimum {m} runs past the end of training; skipping cycle");
                continue;
            }
            match self.get(t) {
                Some(s) => picked.push(s),
                None => warn!("iteration {t} (minimum {m} {steps:+}) was not captured; skipping cycle"),
            }
        }
        non_empty(picked, &format!("offset({steps})"))
    }
}

fn non_empty<'a>(picked: Vec<&'a Snapshot>, policy: &str) -> Result<Vec<&'a Snapshot>, SelectError> {
    if picked.is_empty() {
        Err(SelectError::EmptySelection(policy.to_string()))
    } else {
        Ok(picked)
    }
}
