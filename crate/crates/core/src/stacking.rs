//! Ensemble weights from training-time losses, the weighted ensemble
//! predictor, parameter-space averaging and evaluation.
//!
//! All weight rules return strictly positive weights normalized to sum to the
//! member count `N`, so the prediction `(1/N) Σ w_k f_k(x)` is a convex
//! combination and equal weighting is `w_k = 1`.
//!
//! Likelihood-based rules work on the mean per-example log-likelihood
//! `ℓ = -mean_nll`; the product likelihood over a whole sample underflows.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{compensated_sum, Exec};
use crate::nn::{self, clamped_nll, Dataset, NnError, ParamVector, Predictor};
use crate::snapshots::Snapshot;

/// Tolerance on `Σ w == N`.
pub const WEIGHT_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StackError {
    #[error("ensemble needs at least one member")]
    Empty,
    #[error("loss {value} at position {index} must be positive and finite")]
    InvalidLoss { index: usize, value: f64 },
    #[error("log-likelihood {value} at position {index} must be finite")]
    InvalidLogLikelihood { index: usize, value: f64 },
    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Which loss a weight rule reads from each snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossSource {
    #[default]
    Train,
    Validation,
}

impl LossSource {
    pub fn nll(self, s: &Snapshot) -> f64 {
        match self {
            LossSource::Train => s.train_nll,
            LossSource::Validation => s.val_nll,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossSource::Train => "train",
            LossSource::Validation => "validation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum WeightRule {
    Equal,
    /// `w ∝ 1 / l`.
    InverseLoss,
    /// `w ∝ exp(ℓ)`.
    Likelihood,
    /// `w ∝ exp(ℓ / τ)`.
    Temperature { tau: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightingSpec {
    #[serde(flatten)]
    pub rule: WeightRule,
    #[serde(default)]
    pub source: LossSource,
}

impl WeightingSpec {
    pub fn equal() -> Self {
        Self {
            rule: WeightRule::Equal,
            source: LossSource::Train,
        }
    }

    pub fn temperature(tau: f64, source: LossSource) -> Self {
        Self {
            rule: WeightRule::Temperature { tau },
            source,
        }
    }

    pub fn validate(&self) -> Result<(), StackError> {
        if let WeightRule::Temperature { tau } = self.rule {
            check_tau(tau)?;
        }
        Ok(())
    }
}

fn check_tau(tau: f64) -> Result<(), StackError> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(StackError::InvalidTemperature(tau))
    }
}

/// Scales positive raw weights so they sum to their count.
fn normalize(raw: Vec<f64>) -> Vec<f64> {
    let n = raw.len() as f64;
    let total = compensated_sum(&raw);
    raw.into_iter().map(|w| w * n / total).collect()
}

pub fn weights_equal(n: usize) -> Result<Vec<f64>, StackError> {
    if n == 0 {
        return Err(StackError::Empty);
    }
    Ok(vec![1.0; n])
}

pub fn weights_inverse_loss(losses: &[f64]) -> Result<Vec<f64>, StackError> {
    if losses.is_empty() {
        return Err(StackError::Empty);
    }
    if let Some((index, &value)) = losses
        .iter()
        .enumerate()
        .find(|(_, l)| !(**l > 0.0 && l.is_finite()))
    {
        return Err(StackError::InvalidLoss { index, value });
    }
    Ok(normalize(losses.iter().map(|l| 1.0 / l).collect()))
}

/// Likelihood weighting; identical to [`weights_temperature`] at `τ = 1`.
pub fn weights_likelihood(log_liks: &[f64]) -> Result<Vec<f64>, StackError> {
    weights_temperature(log_liks, 1.0)
}

/// `w_i ∝ exp((ℓ_i - max ℓ) / τ)`.
///
/// Raw weights are floored at the smallest normal `f64` so that members far
/// below the best one at tiny `τ` keep a positive (negligible) weight.
pub fn weights_temperature(log_liks: &[f64], tau: f64) -> Result<Vec<f64>, StackError> {
    check_tau(tau)?;
    if log_liks.is_empty() {
        return Err(StackError::Empty);
    }
    if let Some((index, &value)) = log_liks.iter().enumerate().find(|(_, l)| !l.is_finite()) {
        return Err(StackError::InvalidLogLikelihood { index, value });
    }
    let max = log_liks.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw = log_liks
        .iter()
        .map(|l| ((l - max) / tau).exp().max(f64::MIN_POSITIVE))
        .collect();
    Ok(normalize(raw))
}

/// Weights for `snapshots` under `spec`.
pub fn weights_for(snapshots: &[&Snapshot], spec: &WeightingSpec) -> Result<Vec<f64>, StackError> {
    let nll: Vec<f64> = snapshots.iter().map(|s| spec.source.nll(s)).collect();
    let log_liks = || nll.iter().map(|l| -l).collect::<Vec<_>>();
    match spec.rule {
        WeightRule::Equal => weights_equal(snapshots.len()),
        WeightRule::InverseLoss => weights_inverse_loss(&nll),
        WeightRule::Likelihood => weights_likelihood(&log_liks()),
        WeightRule::Temperature { tau } => weights_temperature(&log_liks(), tau),
    }
}

/// Weighted snapshot ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel<'a> {
    members: Vec<(&'a Snapshot, f64)>,
}

fn check_weights(weights: &[f64]) -> Result<(), StackError> {
    if weights.is_empty() {
        return Err(StackError::Empty);
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
        return Err(StackError::InvalidWeights(format!("weight {w} is not positive")));
    }
    let n = weights.len() as f64;
    let total = compensated_sum(weights);
    if (total - n).abs() > WEIGHT_SUM_TOL {
        return Err(StackError::InvalidWeights(format!(
            "weights sum to {total}, expected {n}"
        )));
    }
    Ok(())
}

impl<'a> EnsembleModel<'a> {
    pub fn new(members: Vec<(&'a Snapshot, f64)>) -> Result<Self, StackError> {
        let weights: Vec<f64> = members.iter().map(|(_, w)| *w).collect();
        check_weights(&weights)?;
        let arch = members[0].0.params.arch();
        if members.iter().any(|(s, _)| s.params.arch() != arch) {
            return Err(NnError::ArchMismatch("ensemble members differ in architecture".into()).into());
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[(&'a Snapshot, f64)] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.members.iter().map(|(_, w)| *w).collect()
    }
}

impl Predictor for EnsembleModel<'_> {
    fn input_dim(&self) -> usize {
        self.members[0].0.params.arch().input_dim()
    }

    fn num_classes(&self) -> usize {
        self.members[0].0.params.arch().num_classes()
    }

    fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        ensemble_predict(self, x)
    }
}

pub fn build_ensemble<'a>(
    snapshots: &[&'a Snapshot],
    spec: &WeightingSpec,
) -> Result<EnsembleModel<'a>, StackError> {
    let weights = weights_for(snapshots, spec)?;
    EnsembleModel::new(snapshots.iter().copied().zip(weights).collect())
}

/// `(1/N) Σ w_k forward(θ_k, x)`.
pub fn ensemble_predict(ens: &EnsembleModel<'_>, x: &[f64]) -> Result<Vec<f64>, NnError> {
    let outputs = ens
        .members
        .iter()
        .map(|(s, _)| nn::forward(&s.params, x))
        .collect::<Result<Vec<_>, _>>()?;
    let mut acc = vec![0.0; ens.num_classes()];
    combine_into(
        ens.members.iter().zip(&outputs).map(|((_, w), p)| (*w, p.as_slice())),
        ens.members.len(),
        &mut acc,
    );
    Ok(acc)
}

/// Accumulates `Σ w_k p_k` in member order, then divides by `n`.
fn combine_into<'p>(weighted: impl Iterator<Item = (f64, &'p [f64])>, n: usize, acc: &mut [f64]) {
    acc.fill(0.0);
    for (w, p) in weighted {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += w * v;
        }
    }
    let n = n as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
}

/// Class probabilities of several models over one dataset, computed once so
/// that many weightings of the same members can be scored cheaply.
///
/// Scores are bit-identical to evaluating the corresponding
/// [`EnsembleModel`] with [`evaluate`].
#[derive(Debug, Clone)]
pub struct PredictionCache<'d> {
    data: &'d Dataset,
    // probs[member][row * k + class]
    probs: Vec<Vec<f64>>,
}

impl<'d> PredictionCache<'d> {
    pub fn new(exec: Exec, members: &[&ParamVector], data: &'d Dataset) -> Result<Self, NnError> {
        let probs = members
            .iter()
            .map(|p| {
                nn::map_rows(exec, p, data, |probs, _| probs.to_vec())
                    .map(|rows| rows.concat())
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { data, probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Scores the ensemble of cached members `members` with `weights`.
    pub fn evaluate(&self, members: &[usize], weights: &[f64]) -> Result<Metrics, StackError> {
        if members.len() != weights.len() {
            return Err(StackError::InvalidWeights(format!(
                "{} weights for {} members",
                weights.len(),
                members.len()
            )));
        }
        check_weights(weights)?;
        if let Some(&bad) = members.iter().find(|&&j| j >= self.probs.len()) {
            return Err(StackError::InvalidWeights(format!("no cached member {bad}")));
        }
        let k = self.data.num_classes();
        let mut acc = vec![0.0; k];
        let mut hits = 0usize;
        let mut nlls = Vec::with_capacity(self.data.len());
        for i in 0..self.data.len() {
            combine_into(
                members
                    .iter()
                    .zip(weights)
                    .map(|(&j, &w)| (w, &self.probs[j][i * k..(i + 1) * k])),
                members.len(),
                &mut acc,
            );
            let label = self.data.label(i);
            hits += usize::from(argmax(&acc) == label);
            nlls.push(clamped_nll(acc[label]));
        }
        Ok(Metrics {
            accuracy: hits as f64 / self.data.len() as f64,
            mean_nll: compensated_sum(&nlls) / self.data.len() as f64,
        })
    }
}

/// Parameter-space average `(1/N) Σ w_k θ_k`.
pub fn swa_average(snapshots: &[&Snapshot], weights: &[f64]) -> Result<ParamVector, StackError> {
    if snapshots.is_empty() {
        return Err(StackError::Empty);
    }
    if snapshots.len() != weights.len() {
        return Err(StackError::InvalidWeights(format!(
            "{} weights for {} snapshots",
            weights.len(),
            snapshots.len()
        )));
    }
    check_weights(weights)?;
    let arch = snapshots[0].params.arch();
    if snapshots.iter().any(|s| s.params.arch() != arch) {
        return Err(NnError::ArchMismatch("snapshots differ in architecture".into()).into());
    }
    let n = snapshots.len() as f64;
    let mut acc = vec![0.0; arch.param_count()];
    for (s, w) in snapshots.iter().zip(weights) {
        let scale = w / n;
        for (a, v) in acc.iter_mut().zip(s.params.values()) {
            *a += scale * v;
        }
    }
    Ok(ParamVector::new(acc, arch.clone())?)
}

/// Accuracy and mean NLL of a predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub mean_nll: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate<P: Predictor + Sync>(predictor: &P, data: &Dataset) -> Result<Metrics, NnError> {
    evaluate_with(Exec::default(), predictor, data)
}

/// Evaluates row by row, then reduces in row order: integer hit count and a
/// compensated NLL sum, identical for every execution strategy.
pub fn evaluate_with<P: Predictor + Sync>(
    exec: Exec,
    predictor: &P,
    data: &Dataset,
) -> Result<Metrics, NnError> {
    if data.dim() != predictor.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: predictor.input_dim(),
            found: data.dim(),
        });
    }
    if data.num_classes() != predictor.num_classes() {
        return Err(NnError::ArchMismatch(format!(
            "dataset has {} classes, predictor outputs {}",
            data.num_classes(),
            predictor.num_classes()
        )));
    }
    let rows = exec.map_range(data.len(), |i| {
        predictor
            .predict(data.row(i))
            .map(|p| (argmax(&p) == data.label(i), clamped_nll(p[data.label(i)])))
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>, _>>()?;
    let hits = rows.iter().filter(|(hit, _)| *hit).count();
    let nlls: Vec<f64> = rows.iter().map(|(_, l)| *l).collect();
    Ok(Metrics {
        accuracy: hits as f64 / data.len() as f64,
        mean_nll: compensated_sum(&nlls) / data.len() as f64,
    })
}

/// Faster evaluation of a single parameter vector, reusing forward buffers.
pub fn evaluate_params(exec: Exec, params: &ParamVector, data: &Dataset) -> Result<Metrics, NnError> {
    let rows = nn::map_rows(exec, params, data, |p, label| {
        (argmax(p) == label, clamped_nll(p[label]))
    })?;
    let hits = rows.iter().filter(|(hit, _)| *hit).count();
    let nlls: Vec<f64> = rows.iter().map(|(_, l)| *l).collect();
    Ok(Metrics {
        accuracy: hits as f64 / data.len() as f64,
        mean_nll: compensated_sum(&nlls) / data.len() as f64,
    })
}
