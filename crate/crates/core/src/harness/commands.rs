use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{Experiment, HarnessError, Policy};
use crate::exec::Exec;
use crate::nn::ParamVector;
use crate::snapshots::{
    self, save_sidecar, save_store, train_with_capture, CapturePlan, Snapshot, SnapshotStore,
    StoreMetadata, TrainedRun, FORMAT_VERSION,
};
use crate::stacking::{
    evaluate_params, swa_average, weights_equal, weights_for, weights_temperature, LossSource,
    Metrics, PredictionCache, WeightRule, WeightingSpec,
};

/// One cell of a temperature × ensemble-size sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub n_models: usize,
    pub accuracy: f64,
    pub mean_nll: f64,
    pub policy: String,
    pub source: String,
}

/// Ensemble quality at a fixed temperature for one offset from the minima.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffsetRow {
    pub offset: i64,
    pub tau: f64,
    pub n_models: usize,
    pub accuracy: f64,
    pub mean_nll: f64,
    pub source: String,
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    pub variant: String,
    pub n_models: usize,
    pub tau: Option<f64>,
    pub accuracy: f64,
    pub mean_nll: f64,
    /// Full training runs behind the row.
    pub train_runs: usize,
}

fn io_err(what: &str, path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{what} {}: {e}", path.display()))
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)?;
    }
    w.into_inner()
        .map_err(|e| HarnessError::Io(format!("flushing csv: {e}")))
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), HarnessError> {
    fs::write(path, csv_bytes(rows)?).map_err(|e| io_err("writing", path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_err("creating", dir, e))
}

pub struct TrainOutput {
    pub store_path: PathBuf,
    pub run: TrainedRun,
    pub elapsed: Duration,
}

impl TrainOutput {
    /// Per-cycle NLL lines of the minima snapshots.
    pub fn summary(&self) -> Vec<String> {
        self.run
            .store
            .snapshots
            .iter()
            .filter(|s| s.tag == snapshots::SnapshotTag::Min)
            .enumerate()
            .map(|(c, s)| {
                format!(
                    "cycle {:>3}  iter {:>6}  train_nll {:.6}  val_nll {:.6}",
                    c + 1,
                    s.iter,
                    s.train_nll,
                    s.val_nll
                )
            })
            .collect()
    }
}

/// Trains once with the union capture plan and writes `store.snap` plus its
/// JSON sidecar into `out_dir`.
pub fn cmd_train(exp: &Experiment, out_dir: &Path) -> Result<TrainOutput, HarnessError> {
    let plan = exp.capture_plan()?;
    let start = Instant::now();
    let run = train_with_capture(&exp.train_spec(exp.config.seed), &exp.train, &exp.val, &plan)?;
    let elapsed = start.elapsed();
    info!(
        "trained {} iterations, captured {} snapshots in {:.2?}",
        run.sgd_steps,
        run.store.len(),
        elapsed
    );

    ensure_dir(out_dir)?;
    let store_path = out_dir.join("store.snap");
    save_store(&run.store, &store_path)?;
    let meta = StoreMetadata {
        format_version: FORMAT_VERSION,
        run_id: run.store.run_id.clone(),
        seed: exp.config.seed,
        batch_size: exp.config.batch_size,
        layer_sizes: exp.arch.layer_sizes().to_vec(),
        schedule: exp.config.schedule,
        snapshot_count: run.store.len(),
        train_fingerprint: exp.train.fingerprint(),
        val_fingerprint: exp.val.fingerprint(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
    };
    save_sidecar(&meta, &store_path)?;
    Ok(TrainOutput {
        store_path,
        run,
        elapsed,
    })
}

/// Loads a store and checks it against the experiment (and against the
/// sidecar's data fingerprint when the sidecar exists).
pub fn load_checked_store(exp: &Experiment, path: &Path) -> Result<SnapshotStore, HarnessError> {
    let store = snapshots::load_store(path)?;
    exp.check_store(&store)?;
    if snapshots::sidecar_path(path).exists() {
        let meta = snapshots::load_sidecar(path)?;
        if meta.train_fingerprint != exp.train.fingerprint() {
            return Err(HarnessError::Validation(format!(
                "store {} was trained on different data than the config describes",
                path.display()
            )));
        }
    }
    Ok(store)
}

fn log_liks(members: &[&Snapshot], source: LossSource) -> Vec<f64> {
    members.iter().map(|s| -source.nll(s)).collect()
}

/// Temperature × ensemble-size grid on the test set.
///
/// For ensemble size `n` the members are the last `n` snapshots of the
/// policy. Sizes beyond the available snapshots are skipped with a warning.
pub fn cmd_sweep_temperature(
    exp: &Experiment,
    store: &SnapshotStore,
    policy: Policy,
    source: LossSource,
    taus: &[f64],
    sizes: &[usize],
    exec: Exec,
) -> Result<Vec<SweepRow>, HarnessError> {
    exp.check_store(store)?;
    let selected = policy.select(store)?;
    let params: Vec<&ParamVector> = selected.iter().map(|s| &s.params).collect();
    let cache = PredictionCache::new(exec, &params, &exp.test)?;

    let mut cells = Vec::with_capacity(taus.len() * sizes.len());
    for &tau in taus {
        for &n in sizes {
            if n == 0 || n > selected.len() {
                warn!(
                    "ensemble size {n} unavailable for policy {policy} ({} snapshots); skipping",
                    selected.len()
                );
                continue;
            }
            cells.push((tau, n));
        }
    }
    let scored = exec.map(&cells, |&(tau, n)| -> Result<SweepRow, HarnessError> {
        let first = selected.len() - n;
        let members: Vec<usize> = (first..selected.len()).collect();
        let weights = weights_temperature(&log_liks(&selected[first..], source), tau)?;
        let m = cache.evaluate(&members, &weights)?;
        Ok(SweepRow {
            tau,
            n_models: n,
            accuracy: m.accuracy,
            mean_nll: m.mean_nll,
            policy: policy.to_string(),
            source: source.name().to_string(),
        })
    });
    scored.into_iter().collect()
}

/// Ensemble quality versus offset from the learning-rate minima at fixed
/// temperature. Offsets that were not captured are skipped with a warning.
pub fn cmd_sweep_offset(
    exp: &Experiment,
    store: &SnapshotStore,
    offsets: &[i64],
    tau: f64,
    source: LossSource,
    exec: Exec,
) -> Result<Vec<OffsetRow>, HarnessError> {
    exp.check_store(store)?;
    let mut rows = Vec::with_capacity(offsets.len());
    for &k in offsets {
        let selected = match store.select_offset(k) {
            Ok(s) => s,
            Err(e) => {
                warn!("offset {k} skipped: {e}");
                continue;
            }
        };
        let params: Vec<&ParamVector> = selected.iter().map(|s| &s.params).collect();
        let cache = PredictionCache::new(exec, &params, &exp.test)?;
        let weights = weights_temperature(&log_liks(&selected, source), tau)?;
        let members: Vec<usize> = (0..selected.len()).collect();
        let m = cache.evaluate(&members, &weights)?;
        rows.push(OffsetRow {
            offset: k,
            tau,
            n_models: selected.len(),
            accuracy: m.accuracy,
            mean_nll: m.mean_nll,
            source: source.name().to_string(),
        });
    }
    Ok(rows)
}

pub struct CompareOutput {
    pub rows: Vec<CompareRow>,
    /// The single run every snapshot and SWA row derives from.
    pub main_run: TrainedRun,
    pub main_run_elapsed: Duration,
    /// SGD iterations across all runs, baselines included.
    pub total_sgd_steps: usize,
}

impl CompareOutput {
    pub fn markdown(&self) -> String {
        compare_markdown(&self.rows)
    }
}

/// Comparison rows as a Markdown table, accuracy in percent.
pub fn compare_markdown(rows: &[CompareRow]) -> String {
    let mut out = String::from(
        "| Model | Type | Number of models | τ | Accuracy, % | Mean NLL | Training runs |\n\
         |---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {} | {} | {:.2} | {:.4} | {} |\n",
            r.model,
            r.variant,
            r.n_models,
            r.tau.map_or("--".to_string(), |t| t.to_string()),
            100.0 * r.accuracy,
            r.mean_nll,
            r.train_runs
        ));
    }
    out
}

/// Picks the temperature with the highest accuracy; the first grid value
/// wins ties.
fn best_over_taus(
    taus: &[f64],
    mut score: impl FnMut(f64) -> Result<Metrics, HarnessError>,
) -> Result<(f64, Metrics), HarnessError> {
    let mut best: Option<(f64, Metrics)> = None;
    for &tau in taus {
        let m = score(tau)?;
        if best.as_ref().is_none_or(|(_, b)| m.accuracy > b.accuracy) {
            best = Some((tau, m));
        }
    }
    best.ok_or_else(|| HarnessError::Validation("empty temperature grid".into()))
}

/// Single model, independent ensemble, snapshot ensembles (equal and
/// stacked) and parameter averages, all scored on the test set.
///
/// Every snapshot and SWA row comes from one training run; only the
/// independent-ensemble baseline trains additional models.
pub fn cmd_compare(exp: &Experiment, exec: Exec) -> Result<CompareOutput, HarnessError> {
    let cfg = &exp.config;
    let plan = exp.capture_plan()?;
    let start = Instant::now();
    let main_run = train_with_capture(&exp.train_spec(cfg.seed), &exp.train, &exp.val, &plan)?;
    let main_run_elapsed = start.elapsed();
    let store = &main_run.store;
    let mut rows = Vec::new();
    let row = |model: &str, variant: String, n: usize, tau: Option<f64>, m: Metrics, runs: usize| CompareRow {
        model: model.to_string(),
        variant,
        n_models: n,
        tau,
        accuracy: m.accuracy,
        mean_nll: m.mean_nll,
        train_runs: runs,
    };

    rows.push(row(
        "single",
        "final".into(),
        1,
        None,
        evaluate_params(exec, &main_run.final_params, &exp.test)?,
        1,
    ));

    // Independent ensemble: member 0 is the main run, the rest use the next seeds.
    let n_ind = cfg.independent_members;
    let extra = exec.map_range(n_ind - 1, |i| {
        train_with_capture(
            &exp.train_spec(cfg.seed.wrapping_add(i as u64 + 1)),
            &exp.train,
            &exp.val,
            &CapturePlan::new(),
        )
    });
    let extra = extra.into_iter().collect::<Result<Vec<_>, _>>()?;
    let total_sgd_steps = main_run.sgd_steps + extra.iter().map(|r| r.sgd_steps).sum::<usize>();
    let mut members: Vec<&ParamVector> = vec![&main_run.final_params];
    members.extend(extra.iter().map(|r| &r.final_params));
    let cache = PredictionCache::new(exec, &members, &exp.test)?;
    let all: Vec<usize> = (0..n_ind).collect();
    rows.push(row(
        "ensemble",
        "individual".into(),
        n_ind,
        None,
        cache.evaluate(&all, &weights_equal(n_ind)?)?,
        n_ind,
    ));

    let mut policies = vec![Policy::Min];
    if cfg.capture.midpoints {
        policies.extend([Policy::Mid, Policy::MinMid]);
    }
    policies.extend(cfg.capture.offsets.iter().filter(|&&k| k != 0).map(|&k| Policy::Offset(k)));
    if let Some(s) = cfg.capture.window_half_width {
        policies.push(Policy::Window(s));
    }

    for policy in policies {
        let selected = match policy.select(store) {
            Ok(s) => s,
            Err(e) => {
                warn!("policy {policy} skipped: {e}");
                continue;
            }
        };
        let n = selected.len();
        let params: Vec<&ParamVector> = selected.iter().map(|s| &s.params).collect();
        let cache = PredictionCache::new(exec, &params, &exp.test)?;
        let all: Vec<usize> = (0..n).collect();
        let score = |spec: &WeightingSpec| -> Result<Metrics, HarnessError> {
            Ok(cache.evaluate(&all, &weights_for(&selected, spec)?)?)
        };
        rows.push(row("snapshot", format!("{policy}, eq"), n, None, score(&WeightingSpec::equal())?, 1));
        let sources: &[LossSource] = if policy == Policy::Min {
            &[LossSource::Train, LossSource::Validation]
        } else {
            &[LossSource::Train]
        };
        for &source in sources {
            let (tau, m) = best_over_taus(&cfg.tau_grid, |tau| score(&WeightingSpec::temperature(tau, source)))?;
            let variant = match source {
                LossSource::Train => format!("{policy}, stack"),
                LossSource::Validation => format!("{policy}, stack, val"),
            };
            rows.push(row("snapshot", variant, n, Some(tau), m, 1));
        }
        if policy == Policy::Min {
            for spec in &cfg.weightings {
                let name = match spec.rule {
                    WeightRule::Equal => "eq".to_string(),
                    WeightRule::InverseLoss => "inverse_loss".to_string(),
                    WeightRule::Likelihood => "likelihood".to_string(),
                    WeightRule::Temperature { tau } => format!("temperature {tau}"),
                };
                let tau = match spec.rule {
                    WeightRule::Temperature { tau } => Some(tau),
                    _ => None,
                };
                rows.push(row(
                    "snapshot",
                    format!("min, {name}, {}", spec.source.name()),
                    n,
                    tau,
                    score(spec)?,
                    1,
                ));
            }
        }
    }

    let minima = store.select_min()?;
    let n = minima.len();
    let swa_eq = swa_average(&minima, &weights_equal(n)?)?;
    rows.push(row("swa", "min, eq".into(), n, None, evaluate_params(exec, &swa_eq, &exp.test)?, 1));
    let (tau, m) = best_over_taus(&cfg.tau_grid, |tau| {
        let w = weights_for(&minima, &WeightingSpec::temperature(tau, LossSource::Train))?;
        Ok(evaluate_params(exec, &swa_average(&minima, &w)?, &exp.test)?)
    })?;
    rows.push(row("swa", "min, stack".into(), n, Some(tau), m, 1));

    Ok(CompareOutput {
        rows,
        main_run,
        main_run_elapsed,
        total_sgd_steps,
    })
}
