//! Dense multilayer perceptron: parameters, forward pass, backpropagation and
//! mini-batch SGD.
//!
//! Models are generic over the scalar type so that the exact same forward and
//! backward code can be run in `f64` when checking gradients. Everything that
//! travels over the simulated network or gets aggregated is `f32`.
//!
//! Hidden layers use the rectifier; the output layer is a softmax, and the
//! training objective is mean cross-entropy.

use std::fmt::Debug;

use num_traits::Float;
use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mnist::LabeledDataset;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("a model needs at least 2 layer dims, got {0}")]
    TooFewDims(usize),
    #[error("layer dims must all be nonzero, got {0:?}")]
    ZeroDim(Vec<usize>),
    #[error("matrix {rows}x{cols} needs {expected} values, got {got}")]
    MatrixLen {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    #[error("layer {layer}: {detail}")]
    Shape { layer: usize, detail: String },
    #[error("non-finite parameter in layer {0}")]
    NonFinite(usize),
    #[error("input width {got} does not match model input dim {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("{labels} labels for a batch of {rows} rows")]
    LabelCount { rows: usize, labels: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty dataset part")]
    EmptyPart,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
}

/// Scalar type usable for model parameters.
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` where `a` is `m x k`, `b` is `k x n`.
    /// Strides are `(row, col)` in elements. When `beta` is zero `c` is
    /// overwritten.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($ty:ty, $kernel:path) => {
        impl Real for $ty {
            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
                // SAFETY: every index the kernel touches lies inside the spans
                // checked above; `c` is uniquely borrowed.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T = f32> {
    rows: usize,
    cols: usize,
    values: Vec<T>,
}

impl<T: Real> DenseMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<T>) -> Result<Self, NnError> {
        if values.len() != rows * cols {
            return Err(NnError::MatrixLen {
                rows,
                cols,
                expected: rows * cols,
                got: values.len(),
            });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        let values: Vec<T> = rows.iter().flatten().copied().collect();
        Self::from_vec(rows.len(), cols, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.values[r * self.cols + c]
    }

    fn cast<U: Real>(&self) -> DenseMatrix<U> {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            values: self
                .values
                .iter()
                .map(|v| U::from_f64(v.as_f64()))
                .collect(),
        }
    }
}

/// One dense layer. `weights` is `out_dim x in_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T = f32> {
    pub weights: DenseMatrix<T>,
    pub bias: Vec<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weights: DenseMatrix::zeros(out_dim, in_dim),
            bias: vec![T::zero(); out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows
    }

    fn param_count(&self) -> usize {
        self.weights.values.len() + self.bias.len()
    }
}

/// Per-layer gradients, shaped like the model they were computed for.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<T = f32> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Real> GradientSet<T> {
    fn zeros_like(model: &MlpModel<T>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.in_dim(), l.out_dim()))
                .collect(),
        }
    }

    /// Gradients flattened in the same order as [`MlpModel::params`].
    pub fn flatten(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.values.iter().chain(l.bias.iter()).copied())
            .collect()
    }
}

/// Multilayer perceptron with rectifier hidden layers and a softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<T = f32> {
    layers: Vec<DenseLayer<T>>,
}

fn check_dims(dims: &[usize]) -> Result<(), NnError> {
    if dims.len() < 2 {
        return Err(NnError::TooFewDims(dims.len()));
    }
    if dims.contains(&0) {
        return Err(NnError::ZeroDim(dims.to_vec()));
    }
    Ok(())
}

impl<T: Real> MlpModel<T> {
    pub fn from_layers(layers: Vec<DenseLayer<T>>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::TooFewDims(0));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return Err(NnError::Shape {
                    layer: i,
                    detail: format!(
                        "bias has {} entries for {} outputs",
                        layer.bias.len(),
                        layer.out_dim()
                    ),
                });
            }
            if layer.in_dim() == 0 || layer.out_dim() == 0 {
                return Err(NnError::Shape {
                    layer: i,
                    detail: "zero-sized layer".to_owned(),
                });
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return Err(NnError::Shape {
                    layer: i,
                    detail: format!(
                        "input dim {} does not follow previous output dim {}",
                        layer.in_dim(),
                        layers[i - 1].out_dim()
                    ),
                });
            }
        }
        let model = Self { layers };
        model.check_finite()?;
        Ok(model)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        check_dims(dims)?;
        Ok(Self {
            layers: dims
                .windows(2)
                .map(|w| DenseLayer::zeros(w[0], w[1]))
                .collect(),
        })
    }

    pub fn layers(&self) -> &[DenseLayer<T>] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(DenseLayer::out_dim))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn same_shape<U>(&self, other: &MlpModel<U>) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.weights.rows == b.weights.rows && a.weights.cols == b.weights.cols)
    }

    /// All parameters in canonical order: per layer, weights row-major then bias.
    pub fn params(&self) -> impl Iterator<Item = T> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.values.iter().chain(l.bias.iter()).copied())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut T> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.values.iter_mut().chain(l.bias.iter_mut()))
    }

    /// Largest absolute per-parameter difference, or `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> Option<f64> {
        if !self.same_shape(other) {
            return None;
        }
        Some(
            self.params()
                .zip(other.params())
                .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
                .fold(0.0, f64::max),
        )
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        for (i, layer) in self.layers.iter().enumerate() {
            let finite = layer
                .weights
                .values
                .iter()
                .chain(&layer.bias)
                .all(|v| v.is_finite());
            if !finite {
                return Err(NnError::NonFinite(i));
            }
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> MlpModel<U> {
        MlpModel {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: l.weights.cast(),
                    bias: l.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

/// Glorot-uniform hidden weights drawn from a ChaCha8 stream seeded with
/// `seed`; zero biases and a zero output layer, so an untrained model
/// predicts the uniform distribution (loss exactly ln 10 for 10 classes).
pub fn init_model(layer_dims: &[usize], seed: u64) -> Result<MlpModel, NnError> {
    check_dims(layer_dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = layer_dims.len() - 2;
    let layers = layer_dims
        .windows(2)
        .enumerate()
        .map(|(l, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let values = if l == last {
                vec![0.0; fan_in * fan_out]
            } else {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
                let dist = Uniform::new_inclusive(-limit, limit);
                (0..fan_in * fan_out)
                    .map(|_| dist.sample(&mut rng))
                    .collect()
            };
            DenseLayer {
                weights: DenseMatrix {
                    rows: fan_out,
                    cols: fan_in,
                    values,
                },
                bias: vec![0.0; fan_out],
            }
        })
        .collect();
    Ok(MlpModel { layers })
}

/// In-place softmax over each row. Returns the summed cross-entropy of
/// `labels` when given (computed from the logits, so it never overflows).
fn softmax_rows<T: Real>(buf: &mut [T], cols: usize, labels: Option<&[u8]>) -> f64 {
    let mut loss = 0.0;
    for (r, row) in buf.chunks_exact_mut(cols).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        if let Some(labels) = labels {
            // -log p_y = log(sum) - (z_y - max); row[y] holds exp(z_y - max).
            let y = labels[r] as usize;
            loss += sum.as_f64().ln() - row[y].as_f64().ln();
        }
        let inv = T::one() / sum;
        for v in row.iter_mut() {
            *v = *v * inv;
        }
    }
    loss
}

/// Reusable buffers for batched forward/backward passes.
struct Workspace<T> {
    outs: Vec<Vec<T>>,
    delta: Vec<T>,
    dprev: Vec<T>,
    grads: GradientSet<T>,
}

impl<T: Real> Workspace<T> {
    fn new(model: &MlpModel<T>) -> Self {
        Self {
            outs: vec![Vec::new(); model.layers.len()],
            delta: Vec::new(),
            dprev: Vec::new(),
            grads: GradientSet::zeros_like(model),
        }
    }

    /// Forward pass over `rows` inputs; `outs[l]` holds layer `l`'s activations,
    /// the last one being class probabilities. Returns summed loss if labels
    /// are given.
    fn forward(
        &mut self,
        model: &MlpModel<T>,
        input: &[T],
        rows: usize,
        labels: Option<&[u8]>,
    ) -> f64 {
        let last = model.layers.len() - 1;
        let mut loss = 0.0;
        for (l, layer) in model.layers.iter().enumerate() {
            let (done, rest) = self.outs.split_at_mut(l);
            let prev: &[T] = if l == 0 { input } else { &done[l - 1] };
            let out = &mut rest[0];
            let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
            out.clear();
            for _ in 0..rows {
                out.extend_from_slice(&layer.bias);
            }
            T::gemm(
                rows,
                in_dim,
                out_dim,
                T::one(),
                prev,
                (in_dim, 1),
                &layer.weights.values,
                (1, in_dim),
                T::one(),
                out,
                (out_dim, 1),
            );
            if l == last {
                loss = softmax_rows(out, out_dim, labels);
            } else {
                for v in out.iter_mut() {
                    *v = v.max(T::zero());
                }
            }
        }
        loss
    }

    /// Backpropagates mean cross-entropy through the activations left by the
    /// last `forward` call, filling `self.grads`.
    fn backward(&mut self, model: &MlpModel<T>, input: &[T], rows: usize, labels: &[u8]) {
        let last = model.layers.len() - 1;
        let classes = model.output_dim();
        let scale = T::one() / T::from_f64(rows as f64);
        self.delta.clear();
        self.delta.extend_from_slice(&self.outs[last]);
        for (r, &y) in labels.iter().enumerate() {
            let i = r * classes + y as usize;
            self.delta[i] = self.delta[i] - T::one();
        }
        for v in self.delta.iter_mut() {
            *v = *v * scale;
        }

        for l in (0..=last).rev() {
            let layer = &model.layers[l];
            let (in_dim, out_dim) = (layer.in_dim(), layer.out_dim());
            let prev: &[T] = if l == 0 { input } else { &self.outs[l - 1] };
            let grad = &mut self.grads.layers[l];
            T::gemm(
                out_dim,
                rows,
                in_dim,
                T::one(),
                &self.delta,
                (1, out_dim),
                prev,
                (in_dim, 1),
                T::zero(),
                &mut grad.weights.values,
                (in_dim, 1),
            );
            grad.bias.iter_mut().for_each(|b| *b = T::zero());
            for row in self.delta.chunks_exact(out_dim) {
                for (b, &d) in grad.bias.iter_mut().zip(row) {
                    *b = *b + d;
                }
            }
            if l == 0 {
                break;
            }
            self.dprev.clear();
            self.dprev.resize(rows * in_dim, T::zero());
            T::gemm(
                rows,
                out_dim,
                in_dim,
                T::one(),
                &self.delta,
                (out_dim, 1),
                &layer.weights.values,
                (in_dim, 1),
                T::zero(),
                &mut self.dprev,
                (in_dim, 1),
            );
            for (d, &a) in self.dprev.iter_mut().zip(prev) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            std::mem::swap(&mut self.delta, &mut self.dprev);
        }
    }
}

fn check_batch<T: Real>(model: &MlpModel<T>, inputs: &DenseMatrix<T>) -> Result<(), NnError> {
    if inputs.cols != model.input_dim() {
        return Err(NnError::InputWidth {
            expected: model.input_dim(),
            got: inputs.cols,
        });
    }
    Ok(())
}

fn check_labels(labels: &[u8], rows: usize, classes: usize) -> Result<(), NnError> {
    if labels.len() != rows {
        return Err(NnError::LabelCount {
            rows,
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y as usize >= classes) {
        return Err(NnError::LabelOutOfRange {
            label: bad as usize,
            classes,
        });
    }
    Ok(())
}

/// Class probabilities for every input row.
pub fn forward<T: Real>(
    model: &MlpModel<T>,
    inputs: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>, NnError> {
    check_batch(model, inputs)?;
    let mut ws = Workspace::new(model);
    ws.forward(model, &inputs.values, inputs.rows, None);
    let values = ws.outs.pop().unwrap_or_default();
    DenseMatrix::from_vec(inputs.rows, model.output_dim(), values)
}

/// Class probabilities plus the summed (not mean) cross-entropy over the batch.
pub fn forward_with_loss<T: Real>(
    model: &MlpModel<T>,
    inputs: &DenseMatrix<T>,
    labels: &[u8],
) -> Result<(DenseMatrix<T>, f64), NnError> {
    check_batch(model, inputs)?;
    check_labels(labels, inputs.rows, model.output_dim())?;
    let mut ws = Workspace::new(model);
    let loss = ws.forward(model, &inputs.values, inputs.rows, Some(labels));
    let values = ws.outs.pop().unwrap_or_default();
    Ok((
        DenseMatrix::from_vec(inputs.rows, model.output_dim(), values)?,
        loss,
    ))
}

/// Mean cross-entropy of `labels` under `model` and its gradient.
pub fn loss_and_grads<T: Real>(
    model: &MlpModel<T>,
    batch: &DenseMatrix<T>,
    labels: &[u8],
) -> Result<(T, GradientSet<T>), NnError> {
    if batch.rows == 0 {
        return Err(NnError::EmptyBatch);
    }
    check_batch(model, batch)?;
    check_labels(labels, batch.rows, model.output_dim())?;
    let mut ws = Workspace::new(model);
    let loss = ws.forward(model, &batch.values, batch.rows, Some(labels));
    ws.backward(model, &batch.values, batch.rows, labels);
    Ok((T::from_f64(loss / batch.rows as f64), ws.grads))
}

/// Local training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_per_round: usize,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 64,
            epochs_per_round: 3,
        }
    }
}

/// Runs `hyper.epochs_per_round` epochs of plain mini-batch SGD over the
/// samples of `data` selected by `part`. The visiting order is reshuffled
/// (Fisher-Yates) from `rng` at the start of every epoch.
///
/// Returns the trained model and the mean loss of each epoch.
pub fn train_local<R: Rng + ?Sized>(
    model: &MlpModel,
    data: &LabeledDataset,
    part: &[usize],
    hyper: &Hyperparams,
    rng: &mut R,
) -> Result<(MlpModel, Vec<f64>), NnError> {
    if part.is_empty() {
        return Err(NnError::EmptyPart);
    }
    if hyper.batch_size == 0 {
        return Err(NnError::ZeroBatchSize);
    }
    if data.width() != model.input_dim() {
        return Err(NnError::InputWidth {
            expected: model.input_dim(),
            got: data.width(),
        });
    }
    let classes = model.output_dim();
    if let Some(&bad) = part.iter().find(|&&i| data.label(i) as usize >= classes) {
        return Err(NnError::LabelOutOfRange {
            label: data.label(bad) as usize,
            classes,
        });
    }

    let mut model = model.clone();
    let mut trace = Vec::with_capacity(hyper.epochs_per_round);
    let mut ws = Workspace::new(&model);
    let mut order = part.to_vec();
    let mut xs: Vec<f32> = Vec::with_capacity(hyper.batch_size * data.width());
    let mut ys: Vec<u8> = Vec::with_capacity(hyper.batch_size);
    let lr = hyper.learning_rate as f32;

    for _ in 0..hyper.epochs_per_round {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            xs.clear();
            ys.clear();
            for &i in chunk {
                xs.extend_from_slice(data.image(i));
                ys.push(data.label(i));
            }
            epoch_loss += ws.forward(&model, &xs, chunk.len(), Some(&ys));
            ws.backward(&model, &xs, chunk.len(), &ys);
            for (layer, grad) in model.layers.iter_mut().zip(&ws.grads.layers) {
                for (w, g) in layer.weights.values.iter_mut().zip(&grad.weights.values) {
                    *w -= lr * g;
                }
                for (b, g) in layer.bias.iter_mut().zip(&grad.bias) {
                    *b -= lr * g;
                }
            }
        }
        trace.push(epoch_loss / order.len() as f64);
    }
    Ok((model, trace))
}

/// Deterministic compute-cost proxy: about 2 flops per parameter forward and
/// 4 backward, per sample seen.
pub fn flop_count<T: Real>(model: &MlpModel<T>, n_samples: usize, epochs: usize) -> u64 {
    6 * model.param_count() as u64 * n_samples as u64 * epochs as u64
}
