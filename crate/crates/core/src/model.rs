//! Flat-parameter feedforward softmax classifiers.
//!
//! A model is a [`ModelSpec`] plus a [`ParamVector`]. Parameters are stored
//! layer by layer; each layer holds its weight matrix row-major by output
//! unit (`fan_out` rows of `fan_in` values) followed by its `fan_out`
//! biases. The last layer is linear and feeds a softmax, every hidden layer
//! applies the configured activation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Empty for multinomial logistic regression.
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::invalid("hidden layer widths must be positive"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.num_classes);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(fan_in, fan_out)| (fan_in + 1) * fan_out)
            .sum()
    }

    /// Start offset and length of the final (fully-connected output) layer.
    pub fn fc_layer_range(&self) -> std::ops::Range<usize> {
        let total = self.param_count();
        let (fan_in, fan_out) = *self.layer_shapes().last().expect("at least one layer");
        total - (fan_in + 1) * fan_out..total
    }
}

/// Flat vector of model parameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "matrix row",
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Labeled samples. Row `r` of `features` carries label `labels[r]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::DimensionMismatch {
                context: "batch labels",
                expected: features.rows(),
                found: labels.len(),
            });
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn check_params(params: &ParamVector, spec: &ModelSpec) -> Result<()> {
    let expected = spec.param_count();
    if params.len() != expected {
        return Err(Error::DimensionMismatch {
            context: "parameter vector",
            expected,
            found: params.len(),
        });
    }
    Ok(())
}

fn check_batch(batch: &Batch, spec: &ModelSpec) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    if batch.features.cols() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "feature columns",
            expected: spec.input_dim,
            found: batch.features.cols(),
        });
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= spec.num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes
        )));
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> ParamVector {
    let mut values = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.layer_shapes() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        values.extend((0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector(values)
}

/// Activations of every layer; `layers[0]` is the input, the last entry holds
/// the logits of the output layer.
struct ForwardPass {
    layers: Vec<Matrix>,
}

fn affine(input: &Matrix, weights: &[f64], biases: &[f64], fan_out: usize) -> Matrix {
    let fan_in = input.cols();
    let mut out = Matrix::zeros(input.rows(), fan_out);
    for r in 0..input.rows() {
        let x = input.row(r);
        let dst = out.row_mut(r);
        for (o, slot) in dst.iter_mut().enumerate() {
            let w = &weights[o * fan_in..(o + 1) * fan_in];
            *slot = biases[o] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    out
}

fn forward_pass(params: &[f64], spec: &ModelSpec, features: &Matrix) -> ForwardPass {
    let shapes = spec.layer_shapes();
    let mut layers = Vec::with_capacity(shapes.len() + 1);
    layers.push(features.clone());
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
        let weights = &params[offset..offset + fan_in * fan_out];
        let biases = &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        offset += (fan_in + 1) * fan_out;
        let mut z = affine(layers.last().unwrap(), weights, biases, fan_out);
        if l + 1 < shapes.len() {
            for v in z.data.iter_mut() {
                *v = spec.activation.apply(*v);
            }
        }
        layers.push(z);
    }
    ForwardPass { layers }
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Class probabilities, one row per sample.
pub fn forward(params: &ParamVector, spec: &ModelSpec, features: &Matrix) -> Result<Matrix> {
    check_params(params, spec)?;
    if features.cols() != spec.input_dim {
        return Err(Error::DimensionMismatch {
            context: "feature columns",
            expected: spec.input_dim,
            found: features.cols(),
        });
    }
    let mut probs = forward_pass(params.as_slice(), spec, features).layers.pop().unwrap();
    for r in 0..probs.rows() {
        softmax_in_place(probs.row_mut(r));
    }
    Ok(probs)
}

/// Mean negative log-probability of the true class.
pub fn cross_entropy_loss(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<f64> {
    check_params(params, spec)?;
    check_batch(batch, spec)?;
    let pass = forward_pass(params.as_slice(), spec, &batch.features);
    let logits = pass.layers.last().unwrap();
    let total: f64 = batch
        .labels
        .iter()
        .enumerate()
        .map(|(r, &y)| {
            let row = logits.row(r);
            log_sum_exp(row) - row[y]
        })
        .sum();
    Ok((total / batch.len() as f64).max(0.0))
}

/// Exact gradient of [`cross_entropy_loss`] by backpropagation.
pub fn gradient(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<ParamVector> {
    check_params(params, spec)?;
    check_batch(batch, spec)?;
    let shapes = spec.layer_shapes();
    let pass = forward_pass(params.as_slice(), spec, &batch.features);
    let n = batch.len() as f64;

    // dL/dlogits = (softmax - onehot) / n
    let mut delta = pass.layers.last().unwrap().clone();
    for (r, &y) in batch.labels.iter().enumerate() {
        let row = delta.row_mut(r);
        softmax_in_place(row);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v /= n;
        }
    }

    let mut grad = vec![0.0; params.len()];
    let mut offset = params.len();
    for l in (0..shapes.len()).rev() {
        let (fan_in, fan_out) = shapes[l];
        offset -= (fan_in + 1) * fan_out;
        let input = &pass.layers[l];
        let (gw, gb) = grad[offset..offset + (fan_in + 1) * fan_out].split_at_mut(fan_in * fan_out);
        for r in 0..input.rows() {
            let d = delta.row(r);
            let a = input.row(r);
            for o in 0..fan_out {
                gb[o] += d[o];
                let w_row = &mut gw[o * fan_in..(o + 1) * fan_in];
                for (g, &x) in w_row.iter_mut().zip(a) {
                    *g += d[o] * x;
                }
            }
        }
        if l > 0 {
            let weights = &params.as_slice()[offset..offset + fan_in * fan_out];
            let mut prev = Matrix::zeros(input.rows(), fan_in);
            for r in 0..input.rows() {
                let d = delta.row(r);
                let a = input.row(r);
                let dst = prev.row_mut(r);
                for o in 0..fan_out {
                    let w_row = &weights[o * fan_in..(o + 1) * fan_in];
                    for (slot, &w) in dst.iter_mut().zip(w_row) {
                        *slot += d[o] * w;
                    }
                }
                for (slot, &out) in dst.iter_mut().zip(a) {
                    *slot *= spec.activation.derivative_from_output(out);
                }
            }
            delta = prev;
        }
    }
    Ok(ParamVector(grad))
}

/// `params - lr * grad`.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    let mut out = params.clone();
    sgd_step_in_place(&mut out, grad, lr)?;
    Ok(out)
}

pub(crate) fn sgd_step_in_place(params: &mut ParamVector, grad: &ParamVector, lr: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::DimensionMismatch {
            context: "sgd step",
            expected: params.len(),
            found: grad.len(),
        });
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be non-negative, got {lr}")));
    }
    for (p, g) in params.0.iter_mut().zip(&grad.0) {
        *p -= lr * g;
    }
    if !params.is_finite() {
        return Err(Error::invalid("sgd step produced non-finite parameters"));
    }
    Ok(())
}

/// Final layer weights (row-major by output unit) followed by its biases.
pub fn extract_fc_layer(params: &ParamVector, spec: &ModelSpec) -> Result<ParamVector> {
    check_params(params, spec)?;
    Ok(ParamVector(params.as_slice()[spec.fc_layer_range()].to_vec()))
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<f64> {
    check_params(params, spec)?;
    check_batch(batch, spec)?;
    let logits = forward_pass(params.as_slice(), spec, &batch.features)
        .layers
        .pop()
        .unwrap();
    // softmax is monotone, argmax over logits is argmax over probabilities
    let correct = batch
        .labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| argmax(logits.row(r)) == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

/// Mini-batch SGD over `data` for `opts.epochs` epochs.
///
/// Each epoch draws a fresh permutation from `rng` and walks it in chunks of
/// `batch_size`. When one batch covers the whole set the samples are used in
/// stored order and no randomness is consumed. `grad` supplies the descent
/// direction so proximal variants can reuse the loop.
pub fn train_sgd<R, G>(
    params: &ParamVector,
    data: &Batch,
    opts: &SgdOptions,
    rng: &mut R,
    mut grad: G,
) -> Result<ParamVector>
where
    R: Rng + ?Sized,
    G: FnMut(&ParamVector, &Batch) -> Result<ParamVector>,
{
    if data.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    if opts.batch_size == 0 {
        return Err(Error::invalid("batch_size must be positive"));
    }
    let mut current = params.clone();
    if opts.batch_size >= data.len() {
        for _ in 0..opts.epochs {
            let g = grad(&current, data)?;
            sgd_step_in_place(&mut current, &g, opts.lr)?;
        }
        return Ok(current);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..opts.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(opts.batch_size) {
            let batch = data.select(chunk);
            let g = grad(&current, &batch)?;
            sgd_step_in_place(&mut current, &g, opts.lr)?;
        }
    }
    Ok(current)
}
