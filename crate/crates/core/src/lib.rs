//! Snapshot ensembles with training-time stacking.
//!
//! A small feedforward classifier is trained once under a cyclical cosine
//! learning rate. Models are captured along that single trajectory (at the
//! learning-rate minima, at the schedule midpoints, at a fixed offset from each
//! minimum, or as the best model inside a window around each minimum) and then
//! combined with weights derived from their training-time likelihood, sharpened
//! or flattened by a temperature.
//!
//! Module map:
//!
//! - [`nn`]: MLP substrate with manual backprop, mean NLL loss and plain SGD.
//! - [`schedule`]: the cyclical learning rate and its phase queries.
//! - [`snapshots`]: training with capture, the snapshot store and the
//!   collection policies.
//! - [`stacking`]: ensemble weights, weighted prediction, parameter averaging
//!   and evaluation.
//! - [`data`]: synthetic blobs, IDX loading, train/validation splitting.
//! - [`harness`]: experiment configuration and the CLI commands.
//!
//! Batch evaluations run on rayon when the `parallel` feature is enabled (the
//! default); [`exec::Exec`] selects the strategy per call and both strategies
//! produce bit-identical results.

pub mod data;
pub mod exec;
pub mod harness;
pub mod nn;
pub mod schedule;
pub mod snapshots;
pub mod stacking;

pub use data::{load_idx, make_blobs, split, BlobGenerator, DataError, SplitSpec};
pub use exec::Exec;
pub use nn::{
    backward, forward, init_params, nll_loss, sgd_step, Dataset, MlpArchitecture, NnError,
    ParamVector, Predictor,
};
pub use schedule::{CycleConfig, ScheduleError};
pub use snapshots::{
    load_store, save_store, train_with_capture, CapturePlan, SelectError, Snapshot, SnapshotStore,
    SnapshotTag, StoreError, TrainError, TrainSpec, TrainedRun,
};
pub use stacking::{
    build_ensemble, ensemble_predict, evaluate, swa_average, weights_equal, weights_inverse_loss,
    weights_likelihood, weights_temperature, EnsembleModel, LossSource, Metrics, PredictionCache,
    StackError,
    WeightRule, WeightingSpec,
};
