//! Forward kernels: softmax, LayerNorm, affine maps, activations and MLPs.
//!
//! These are plain value functions. The tape in [`super::tape`] reuses them
//! for its forward pass and supplies the matching backward rules.

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Which slices of a matrix softmax normalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    /// Every row becomes a distribution (the row-wise default).
    Rows,
    /// Every column becomes a distribution.
    Cols,
}

impl Default for Axis {
    fn default() -> Self {
        Axis::Rows
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
    Gelu,
    /// GELU-gated linear unit: the pre-activation is split in two along the
    /// feature axis and the output is `gelu(top) ⊙ bottom`, halving the width.
    Geglu,
    /// Softmax over the feature axis of each column.
    Softmax,
}

impl Activation {
    /// Output width for a given pre-activation width.
    pub fn output_dim(self, input: usize) -> usize {
        match self {
            Activation::Geglu => input / 2,
            _ => input,
        }
    }
}

/// Numerically stable softmax with an optional causal mask.
///
/// With `causal`, entry `(r, c)` is excluded whenever `r > c`; under
/// [`Axis::Cols`] this lets column `c` (a query) see rows `0..=c` (keys).
pub(crate) fn softmax_masked(x: &Matrix, axis: Axis, causal: bool) -> Result<Matrix> {
    if x.is_empty() {
        return Err(Error::Empty("softmax"));
    }
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    let visible = |r: usize, c: usize| !causal || r <= c;
    match axis {
        Axis::Rows => {
            for r in 0..rows {
                let mut max = f64::NEG_INFINITY;
                for c in 0..cols {
                    if visible(r, c) {
                        max = max.max(x.get(r, c));
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for c in 0..cols {
                    if visible(r, c) {
                        let e = (x.get(r, c) - max).exp();
                        out.set(r, c, e);
                        sum += e;
                    }
                }
                for c in 0..cols {
                    out.set(r, c, out.get(r, c) / sum);
                }
            }
        }
        Axis::Cols => {
            for c in 0..cols {
                let mut max = f64::NEG_INFINITY;
                for r in 0..rows {
                    if visible(r, c) {
                        max = max.max(x.get(r, c));
                    }
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for r in 0..rows {
                    if visible(r, c) {
                        let e = (x.get(r, c) - max).exp();
                        out.set(r, c, e);
                        sum += e;
                    }
                }
                for r in 0..rows {
                    out.set(r, c, out.get(r, c) / sum);
                }
            }
        }
    }
    Ok(out)
}

/// Softmax along `axis`.
pub fn softmax(x: &Matrix, axis: Axis) -> Result<Matrix> {
    softmax_masked(x, axis, false)
}

/// LayerNorm of one vector with scalar gain and shift, population variance.
pub fn layer_norm(x: &[f64], gamma: f64, beta: f64, epsilon: f64) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::Empty("layer_norm"));
    }
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    let sigma = (var + epsilon).sqrt();
    if sigma == 0.0 {
        // x is constant and epsilon is zero: every centred entry is zero.
        return Ok(vec![beta; x.len()]);
    }
    Ok(x.iter().map(|v| (v - mu) / sigma * gamma + beta).collect())
}

/// Column-wise LayerNorm. Returns the output together with the normalized
/// activations and per-column σ needed by the backward pass.
pub(crate) fn layer_norm_cols(
    x: &Matrix,
    gamma: f64,
    beta: f64,
    epsilon: f64,
) -> Result<(Matrix, Matrix, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::Empty("layer_norm"));
    }
    let (rows, cols) = x.shape();
    let n = rows as f64;
    let mut xhat = Matrix::zeros(rows, cols);
    let mut sigmas = Vec::with_capacity(cols);
    for c in 0..cols {
        let mu = (0..rows).map(|r| x.get(r, c)).sum::<f64>() / n;
        let var = (0..rows).map(|r| (x.get(r, c) - mu).powi(2)).sum::<f64>() / n;
        let sigma = (var + epsilon).sqrt();
        for r in 0..rows {
            let v = if sigma > 0.0 { (x.get(r, c) - mu) / sigma } else { 0.0 };
            xhat.set(r, c, v);
        }
        sigmas.push(sigma);
    }
    let out = xhat.map(|v| v * gamma + beta);
    Ok((out, xhat, sigmas))
}

/// Learnable affine map `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearParams {
    pub w: Matrix,
    /// Bias as a `d_out × 1` column, broadcast across input columns.
    pub b: Matrix,
}

impl LinearParams {
    pub fn new(w: Matrix, b: Vec<f64>) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(Error::shape(
                "LinearParams::new",
                format!("bias of length {} for {} output rows", b.len(), w.rows()),
            ));
        }
        Ok(LinearParams {
            w,
            b: Matrix::column(&b)?,
        })
    }

    pub fn identity(d: usize) -> Self {
        LinearParams {
            w: Matrix::identity(d),
            b: Matrix::zeros(d, 1),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }
}

/// `W x + b 1ᵀ`.
pub fn linear(x: &Matrix, p: &LinearParams) -> Result<Matrix> {
    if p.b.shape() != (p.w.rows(), 1) {
        return Err(Error::shape("linear", "bias is not a d_out x 1 column"));
    }
    let wx = p.w.matmul(x)?;
    Ok(add_col(&wx, &p.b))
}

pub(crate) fn add_col(x: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |r, c| x.get(r, c) + b.get(r, 0))
}

const SQRT_2: f64 = std::f64::consts::SQRT_2;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub fn activate(x: &Matrix, act: Activation) -> Result<Matrix> {
    match act {
        Activation::Identity => Ok(x.clone()),
        Activation::Relu => Ok(x.map(|v| v.max(0.0))),
        Activation::Gelu => Ok(x.map(gelu)),
        Activation::Softmax => softmax(x, Axis::Cols),
        Activation::Geglu => {
            if x.rows() % 2 != 0 {
                return Err(Error::shape("geglu", "odd pre-activation width"));
            }
            let half = x.rows() / 2;
            Ok(Matrix::from_fn(half, x.cols(), |r, c| {
                gelu(x.get(r, c)) * x.get(r + half, c)
            }))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    pub activation: Activation,
    pub params: LinearParams,
}

/// An ordered chain of (activation ∘ linear) layers, applied column-wise.
///
/// FFN blocks inside the transformer stacks are the same object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layers: Vec<MlpLayer>,
}

impl MlpSpec {
    pub fn new(layers: Vec<MlpLayer>) -> Result<Self> {
        let spec = MlpSpec { layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.layers.first().ok_or(Error::Empty("MlpSpec"))?;
        let mut width = first.params.d_in();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.params.d_in() != width {
                return Err(Error::shape(
                    "mlp",
                    format!("layer {i} expects {} inputs, chain provides {width}", layer.params.d_in()),
                ));
            }
            if layer.activation == Activation::Geglu && layer.params.d_out() % 2 != 0 {
                return Err(Error::shape("mlp", format!("layer {i}: geglu needs an even width")));
            }
            width = layer.activation.output_dim(layer.params.d_out());
        }
        Ok(())
    }

    pub fn d_in(&self) -> usize {
        self.layers[0].params.d_in()
    }

    pub fn d_out(&self) -> usize {
        let last = self.layers.last().expect("validated non-empty");
        last.activation.output_dim(last.params.d_out())
    }
}

pub fn mlp(x: &Matrix, spec: &MlpSpec) -> Result<Matrix> {
    spec.validate()?;
    if x.rows() != spec.d_in() {
        return Err(Error::shape(
            "mlp",
            format!("input has {} rows, first layer expects {}", x.rows(), spec.d_in()),
        ));
    }
    let mut h = x.clone();
    for layer in &spec.layers {
        h = activate(&linear(&h, &layer.params)?, layer.activation)?;
    }
    Ok(h)
}

/// Cosine similarity with the convention `cos(0, ·) = 0`.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Sinusoidal position code of width `d` for position `pos` (0-based).
pub fn sinusoidal(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|k| {
            let pair = (k / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}
