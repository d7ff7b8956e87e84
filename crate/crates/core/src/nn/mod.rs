//! Feedforward ReLU classifier with a softmax head, trained by plain SGD on
//! the mean negative log-likelihood.
//!
//! Parameters live in one flat `f64` vector. Layer `l` occupies a weight block
//! of shape `(out, in)` in row-major order followed by its `out` biases.

mod dataset;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{compensated_sum, Exec};

pub use dataset::Dataset;

/// Smallest probability fed to `ln` when scoring the true class.
pub const PROB_FLOOR: f64 = 1e-300;

const ROWS_PER_CHUNK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("parameter vector has {found} values, architecture needs {expected}")]
    ParamLength { expected: usize, found: usize },
    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),
    #[error("non-finite parameter at index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpArchitecture {
    layer_sizes: Vec<usize>,
    #[serde(default)]
    hidden_activation: Activation,
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    w_off: usize,
    b_off: usize,
    fan_in: usize,
    fan_out: usize,
}

impl MlpArchitecture {
    /// `layer_sizes` is `[input, hidden..., classes]`.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, NnError> {
        let arch = Self {
            layer_sizes,
            hidden_activation: Activation::Relu,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_sizes.len() < 2 {
            return Err(NnError::InvalidArchitecture(format!(
                "need at least input and output layers, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(NnError::InvalidArchitecture(format!(
                "layer sizes must be >= 1, got {:?}",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden_activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated architecture")
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn shapes(&self) -> Vec<LayerShape> {
        let mut off = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let shape = LayerShape {
                    w_off: off,
                    b_off: off + w[0] * w[1],
                    fan_in: w[0],
                    fan_out: w[1],
                };
                off += w[0] * w[1] + w[1];
                shape
            })
            .collect()
    }

    /// Checks that `data` can be fed to this architecture.
    pub fn check_dataset(&self, data: &Dataset) -> Result<(), NnError> {
        if data.dim() != self.input_dim() {
            return Err(NnError::DimensionMismatch {
                expected: self.input_dim(),
                found: data.dim(),
            });
        }
        if data.num_classes() != self.num_classes() {
            return Err(NnError::ArchMismatch(format!(
                "dataset has {} classes, output layer has {}",
                data.num_classes(),
                self.num_classes()
            )));
        }
        Ok(())
    }
}

/// Flat parameter vector tied to its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    arch: MlpArchitecture,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, arch: MlpArchitecture) -> Result<Self, NnError> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(NnError::ParamLength {
                expected: arch.param_count(),
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { index });
        }
        Ok(Self { values, arch })
    }

    pub fn zeros(arch: MlpArchitecture) -> Self {
        Self {
            values: vec![0.0; arch.param_count()],
            arch,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn arch(&self) -> &MlpArchitecture {
        &self.arch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Anything that maps a feature vector to a class-probability vector.
pub trait Predictor {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError>;
}

impl Predictor for ParamVector {
    fn input_dim(&self) -> usize {
        self.arch.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes()
    }

    fn predict(&self, x: &[f64]) -> Result<Vec<f64>, NnError> {
        forward(self, x)
    }
}

/// Reusable activation buffers for one architecture.
pub(crate) struct Workspace {
    shapes: Vec<LayerShape>,
    // acts[0] is the input, acts[l + 1] the output of layer l.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_prev: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(arch: &MlpArchitecture) -> Self {
        let widest = arch.layer_sizes().iter().copied().max().unwrap_or(0);
        Self {
            shapes: arch.shapes(),
            acts: arch.layer_sizes().iter().map(|&n| vec![0.0; n]).collect(),
            delta: Vec::with_capacity(widest),
            delta_prev: Vec::with_capacity(widest),
        }
    }

    /// Runs the network on `x`; the returned slice holds the softmax output.
    fn run(&mut self, values: &[f64], x: &[f64]) -> &[f64] {
        self.acts[0].copy_from_slice(x);
        let last = self.shapes.len() - 1;
        for (l, shape) in self.shapes.iter().enumerate() {
            let (before, after) = self.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            let weights = &values[shape.w_off..shape.b_off];
            let biases = &values[shape.b_off..shape.b_off + shape.fan_out];
            for (o, z) in out.iter_mut().enumerate() {
                let row = &weights[o * shape.fan_in..(o + 1) * shape.fan_in];
                let dot: f64 = row.iter().zip(input.iter()).map(|(w, a)| w * a).sum();
                *z = dot + biases[o];
            }
            if l < last {
                for z in out.iter_mut() {
                    *z = z.max(0.0);
                }
            } else {
                softmax_in_place(out);
            }
        }
        &self.acts[last + 1]
    }

    /// Adds `scale * d(-ln p_label)/dθ` at `x` into `grad`.
    fn accumulate_gradient(
        &mut self,
        values: &[f64],
        x: &[f64],
        label: usize,
        scale: f64,
        grad: &mut [f64],
    ) {
        self.run(values, x);
        let last = self.shapes.len();
        self.delta.clear();
        self.delta.extend_from_slice(&self.acts[last]);
        self.delta[label] -= 1.0;
        for d in &mut self.delta {
            *d *= scale;
        }
        for l in (0..self.shapes.len()).rev() {
            let shape = self.shapes[l];
            let input = &self.acts[l];
            for (o, &d) in self.delta.iter().enumerate() {
                let g_row = &mut grad[shape.w_off + o * shape.fan_in..shape.w_off + (o + 1) * shape.fan_in];
                for (g, a) in g_row.iter_mut().zip(input.iter()) {
                    *g += d * a;
                }
                grad[shape.b_off + o] += d;
            }
            if l == 0 {
                break;
            }
            self.delta_prev.clear();
            self.delta_prev.resize(shape.fan_in, 0.0);
            let weights = &values[shape.w_off..shape.b_off];
            for (o, &d) in self.delta.iter().enumerate() {
                let row = &weights[o * shape.fan_in..(o + 1) * shape.fan_in];
                for (dp, w) in self.delta_prev.iter_mut().zip(row.iter()) {
                    *dp += w * d;
                }
            }
            // ReLU derivative, read off the post-activation.
            for (dp, a) in self.delta_prev.iter_mut().zip(input.iter()) {
                if *a <= 0.0 {
                    *dp = 0.0;
                }
            }
            std::mem::swap(&mut self.delta, &mut self.delta_prev);
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn check_input(arch: &MlpArchitecture, x: &[f64]) -> Result<(), NnError> {
    if x.len() != arch.input_dim() {
        return Err(NnError::DimensionMismatch {
            expected: arch.input_dim(),
            found: x.len(),
        });
    }
    Ok(())
}

/// Class probabilities for one feature vector.
pub fn forward(params: &ParamVector, x: &[f64]) -> Result<Vec<f64>, NnError> {
    check_input(&params.arch, x)?;
    let mut ws = Workspace::new(&params.arch);
    Ok(ws.run(&params.values, x).to_vec())
}

/// Pre-activation values of every hidden layer at `x`, in layer order.
///
/// Useful for locating ReLU kinks, where finite differences are meaningless.
pub fn hidden_preactivations(params: &ParamVector, x: &[f64]) -> Result<Vec<Vec<f64>>, NnError> {
    check_input(&params.arch, x)?;
    let shapes = params.arch.shapes();
    let mut input = x.to_vec();
    let mut out = Vec::with_capacity(shapes.len().saturating_sub(1));
    for shape in &shapes[..shapes.len() - 1] {
        let z: Vec<f64> = (0..shape.fan_out)
            .map(|o| {
                let row = &params.values[shape.w_off + o * shape.fan_in..shape.w_off + (o + 1) * shape.fan_in];
                row.iter().zip(&input).map(|(w, a)| w * a).sum::<f64>() + params.values[shape.b_off + o]
            })
            .collect();
        input = z.iter().map(|v| v.max(0.0)).collect();
        out.push(z);
    }
    Ok(out)
}

/// Applies `f(probabilities, label)` to every row of `data`, in row order.
pub(crate) fn map_rows<R, F>(
    exec: Exec,
    params: &ParamVector,
    data: &Dataset,
    f: F,
) -> Result<Vec<R>, NnError>
where
    R: Send,
    F: Fn(&[f64], usize) -> R + Sync + Send,
{
    params.arch.check_dataset(data)?;
    let chunks = data.len().div_ceil(ROWS_PER_CHUNK);
    let per_chunk = exec.map_range(chunks, |c| {
        let mut ws = Workspace::new(&params.arch);
        let end = ((c + 1) * ROWS_PER_CHUNK).min(data.len());
        (c * ROWS_PER_CHUNK..end)
            .map(|i| f(ws.run(&params.values, data.row(i)), data.label(i)))
            .collect::<Vec<R>>()
    });
    Ok(per_chunk.into_iter().flatten().collect())
}

/// `-ln p` with the probability floored at [`PROB_FLOOR`].
pub fn clamped_nll(p: f64) -> f64 {
    -p.max(PROB_FLOOR).ln()
}

/// Mean per-example negative log-likelihood of `data` under `params`.
pub fn nll_loss(params: &ParamVector, data: &Dataset) -> Result<f64, NnError> {
    nll_loss_with(Exec::default(), params, data)
}

pub fn nll_loss_with(exec: Exec, params: &ParamVector, data: &Dataset) -> Result<f64, NnError> {
    let losses = map_rows(exec, params, data, |probs, label| clamped_nll(probs[label]))?;
    Ok(compensated_sum(&losses) / data.len() as f64)
}

/// Gradient of the mean NLL over `batch`.
pub fn backward(params: &ParamVector, batch: &Dataset) -> Result<ParamVector, NnError> {
    params.arch.check_dataset(batch)?;
    let mut ws = Workspace::new(&params.arch);
    let mut grad = vec![0.0; params.len()];
    let indices: Vec<usize> = (0..batch.len()).collect();
    gradient_into(&mut ws, params, batch, &indices, &mut grad);
    Ok(ParamVector {
        values: grad,
        arch: params.arch.clone(),
    })
}

/// Writes the mean-NLL gradient over `data[indices]` into `grad`.
pub(crate) fn gradient_into(
    ws: &mut Workspace,
    params: &ParamVector,
    data: &Dataset,
    indices: &[usize],
    grad: &mut [f64],
) {
    grad.fill(0.0);
    let scale = 1.0 / indices.len() as f64;
    for &i in indices {
        ws.accumulate_gradient(&params.values, data.row(i), data.label(i), scale, grad);
    }
}

/// `params - lr * gradient`.
pub fn sgd_step(params: &ParamVector, gradient: &ParamVector, lr: f64) -> Result<ParamVector, NnError> {
    if params.arch != gradient.arch {
        return Err(NnError::ArchMismatch("gradient and parameters differ in shape".into()));
    }
    let mut next = params.clone();
    sgd_update(&mut next, &gradient.values, lr)?;
    Ok(next)
}

/// In-place SGD update; fails on the first non-finite coordinate.
pub(crate) fn sgd_update(params: &mut ParamVector, gradient: &[f64], lr: f64) -> Result<(), NnError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(NnError::InvalidLearningRate(lr));
    }
    debug_assert_eq!(params.values.len(), gradient.len());
    for (p, g) in params.values.iter_mut().zip(gradient) {
        *p -= lr * g;
    }
    match params.values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(NnError::NonFinite { index }),
        None => Ok(()),
    }
}

/// He-style initialization: weights ~ N(0, 2 / fan_in), biases zero.
pub fn init_params(arch: &MlpArchitecture, seed: u64) -> Result<ParamVector, NnError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; arch.param_count()];
    for shape in arch.shapes() {
        let std = (2.0 / shape.fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for w in &mut values[shape.w_off..shape.b_off] {
            *w = normal.sample(&mut rng);
        }
    }
    Ok(ParamVector {
        values,
        arch: arch.clone(),
    })
}
