//! Differentiable primitives with explicit backward functions.
//!
//! Every layer exposes a pure `forward` that returns its output together
//! with whatever it needs for the backward pass, and a `backward` that takes
//! the upstream gradient, accumulates parameter gradients into
//! [`Param::grad`] and returns the gradient with respect to the input.
//! All reductions run in a fixed order so results are bitwise reproducible.

mod checkpoint;
pub mod gradcheck;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use self::checkpoint::{Checkpoint, TensorRecord, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("{op}: shape mismatch, expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("batch norm in training mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),
    #[error("{op}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, KernelError>;

/// A learnable tensor with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array2<f64>) -> Self {
        let grad = Array2::zeros(value.raw_dim());
        Self {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::new(name, Array2::zeros((rows, cols)))
    }

    pub fn filled(name: impl Into<String>, rows: usize, cols: usize, v: f64) -> Self {
        Self::new(name, Array2::from_elem((rows, cols), v))
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn kaiming_uniform<R: Rng + ?Sized>(
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound));
        Self::new(name, value)
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.value.nrows(), self.value.ncols()]
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

fn check_shape(op: &'static str, expected: &[usize], found: &[usize]) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(KernelError::ShapeMismatch {
            op,
            expected: expected.to_vec(),
            found: found.to_vec(),
        })
    }
}

/// `x·W + b` with `b` a `[1, d_out]` row.
pub fn linear(x: &ArrayView2<f64>, w: &Array2<f64>, b: &Array2<f64>) -> Result<Array2<f64>> {
    check_shape("linear", &[x.nrows(), w.nrows()], x.shape())?;
    check_shape("linear bias", &[1, w.ncols()], b.shape())?;
    Ok(x.dot(w) + b)
}

/// Returns `(dx, dW, db)` for `y = x·W + b`.
pub fn linear_backward(
    x: &ArrayView2<f64>,
    w: &Array2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let dx = dy.dot(&w.t());
    let dw = x.t().dot(dy);
    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    (dx, dw, db)
}

/// Dense affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::kaiming_uniform(format!("{name}.weight"), d_in, d_out, d_in, rng),
            bias: Param::zeros(format!("{name}.bias"), 1, d_out),
        }
    }

    pub fn zeros(name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            weight: Param::zeros(format!("{name}.weight"), d_in, d_out),
            bias: Param::zeros(format!("{name}.bias"), 1, d_out),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        linear(&x.view(), &self.weight.value, &self.bias.value)
    }

    pub fn backward(&mut self, x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        let (dx, dw, db) = linear_backward(&x.view(), &self.weight.value, dy);
        self.weight.grad += &dw;
        self.bias.grad += &db;
        dx
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

/// `ln(1 + e^x)`, returning `x` itself above 30.
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(sigmoid_scalar)
}

pub fn sigmoid_backward(y: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    Zip::from(y).and(dy).map_collect(|&s, &g| g * s * (1.0 - s))
}

pub fn silu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(silu_scalar)
}

pub fn silu_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    Zip::from(x)
        .and(dy)
        .map_collect(|&x, &g| g * silu_grad_scalar(x))
}

pub fn softplus(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(softplus_scalar)
}

pub fn softplus_backward(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    Zip::from(x)
        .and(dy)
        .map_collect(|&x, &g| g * sigmoid_scalar(x))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-feature batch normalisation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    mode: Mode,
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
    batch_mean: Array1<f64>,
    batch_var: Array1<f64>,
}

impl BatchNorm {
    pub fn new(name: &str, dim: usize) -> Self {
        Self {
            gamma: Param::filled(format!("{name}.gamma"), 1, dim, 1.0),
            beta: Param::zeros(format!("{name}.beta"), 1, dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn dim(&self) -> usize {
        self.running_mean.len()
    }

    /// Normalises `x`. Training mode uses the biased batch variance and
    /// leaves the running statistics untouched; call
    /// [`BatchNorm::update_running`] with the returned cache to fold them in.
    pub fn forward(&self, x: &Array2<f64>, mode: Mode) -> Result<(Array2<f64>, BatchNormCache)> {
        check_shape("batch_norm", &[x.nrows(), self.dim()], x.shape())?;
        let n = x.nrows();
        let (mean, var) = match mode {
            Mode::Train => {
                if n < 2 {
                    return Err(KernelError::BatchTooSmall(n));
                }
                column_mean_var(x)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let x_hat = (x - &mean.view().insert_axis(Axis(0))) * inv_std.view().insert_axis(Axis(0));
        let y = &x_hat * &self.gamma.value + &self.beta.value;
        Ok((
            y,
            BatchNormCache {
                mode,
                x_hat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
            },
        ))
    }

    /// Momentum update of the running statistics with the unbiased batch
    /// variance. No-op for caches produced in evaluation mode.
    pub fn update_running(&mut self, cache: &BatchNormCache) {
        if cache.mode != Mode::Train {
            return;
        }
        let n = cache.x_hat.nrows() as f64;
        let m = self.momentum;
        let unbiased = &cache.batch_var * (n / (n - 1.0));
        self.running_mean = &self.running_mean * (1.0 - m) + &cache.batch_mean * m;
        self.running_var = &self.running_var * (1.0 - m) + unbiased * m;
    }

    pub fn backward(&mut self, cache: &BatchNormCache, dy: &Array2<f64>) -> Array2<f64> {
        let gamma = self.gamma.value.row(0).to_owned();
        self.gamma.grad += &(dy * &cache.x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.beta.grad += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        let scale = (&gamma * &cache.inv_std).insert_axis(Axis(0));
        match cache.mode {
            Mode::Eval => dy * &scale,
            Mode::Train => {
                let n = dy.nrows() as f64;
                let sum_dy = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                let sum_dy_xhat = (dy * &cache.x_hat).sum_axis(Axis(0)).insert_axis(Axis(0));
                (dy * n - &sum_dy - &cache.x_hat * &sum_dy_xhat) * &scale / n
            }
        }
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.gamma, &mut self.beta]
    }
}

/// Column mean and biased variance, accumulated row by row.
fn column_mean_var(x: &Array2<f64>) -> (Array1<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mean = x.sum_axis(Axis(0)) / n;
    let centered = x - &mean.view().insert_axis(Axis(0));
    let var = (&centered * &centered).sum_axis(Axis(0)) / n;
    (mean, var)
}

/// Sums rows of `values` into `n_segments` buckets in ascending row order.
pub fn segment_sum(
    values: &Array2<f64>,
    segment_ids: &[usize],
    n_segments: usize,
) -> Result<Array2<f64>> {
    check_shape("segment_sum", &[segment_ids.len()], &[values.nrows()])?;
    let mut out = Array2::zeros((n_segments, values.ncols()));
    for (row, &id) in values.outer_iter().zip(segment_ids) {
        if id >= n_segments {
            return Err(KernelError::IndexOutOfRange {
                op: "segment_sum",
                index: id,
                len: n_segments,
            });
        }
        let mut target = out.row_mut(id);
        target += &row;
    }
    Ok(out)
}

/// Gradient of [`segment_sum`]: each contributor receives its segment's gradient.
pub fn segment_sum_backward(dy: &Array2<f64>, segment_ids: &[usize]) -> Array2<f64> {
    gather_rows(dy, segment_ids)
}

pub fn gather_rows(x: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), x.ncols()));
    for (mut row, &i) in out.outer_iter_mut().zip(idx) {
        row.assign(&x.row(i));
    }
    out
}

/// Row lookup into an embedding table.
pub fn embedding(indices: &[usize], table: &Array2<f64>) -> Result<Array2<f64>> {
    if let Some(&bad) = indices.iter().find(|&&i| i >= table.nrows()) {
        return Err(KernelError::IndexOutOfRange {
            op: "embedding",
            index: bad,
            len: table.nrows(),
        });
    }
    Ok(gather_rows(table, indices))
}

/// Accumulates `dy` into the rows of `table_grad` selected by `indices`.
pub fn embedding_backward(indices: &[usize], dy: &Array2<f64>, table_grad: &mut Array2<f64>) {
    for (row, &i) in dy.outer_iter().zip(indices) {
        let mut target = table_grad.row_mut(i);
        target += &row;
    }
}

/// Column-wise concatenation.
pub fn concat(parts: &[&Array2<f64>]) -> Result<Array2<f64>> {
    let n = parts.first().map_or(0, |p| p.nrows());
    for p in parts {
        check_shape("concat", &[n], &[p.nrows()])?;
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(1), &views).map_err(|_| KernelError::ShapeMismatch {
        op: "concat",
        expected: vec![n],
        found: parts.iter().map(|p| p.nrows()).collect(),
    })
}

/// Splits a concatenated gradient back into column blocks of the given widths.
pub fn concat_backward(dy: &Array2<f64>, widths: &[usize]) -> Vec<Array2<f64>> {
    let mut start = 0;
    widths
        .iter()
        .map(|&w| {
            let block = dy.slice(s![.., start..start + w]).to_owned();
            start += w;
            block
        })
        .collect()
}
