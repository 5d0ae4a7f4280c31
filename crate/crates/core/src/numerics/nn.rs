//! Forward and backward passes for the small networks used here: a single
//! affine layer and a two-layer affine/ReLU/dropout/affine stack, both trained
//! on mean softmax cross-entropy.

use crate::error::{Error, Result};

use super::matrix::Matrix;
use super::rng::RngStream;

/// Probability floor used inside the log of the cross-entropy.
pub const CE_EPSILON: f64 = 1e-12;

/// `input · weightsᵀ + bias` for `input: N×D`, `weights: C×D`, `bias: C`.
pub fn linear_forward(input: &Matrix, weights: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if input.cols() != weights.cols() {
        return Err(Error::dim(
            "linear_forward",
            format!("input {}", input.shape_string()),
            format!("weights {}", weights.shape_string()),
        ));
    }
    if bias.len() != weights.rows() {
        return Err(Error::dim(
            "linear_forward",
            format!("weights {}", weights.shape_string()),
            format!("bias {}", bias.len()),
        ));
    }
    let mut out = Matrix::zeros(input.rows(), weights.rows());
    for n in 0..input.rows() {
        let x = input.row(n);
        let o = out.row_mut(n);
        for (c, oc) in o.iter_mut().enumerate() {
            let w = weights.row(c);
            let mut acc = bias[c];
            for (xi, wi) in x.iter().zip(w) {
                acc += xi * wi;
            }
            *oc = acc;
        }
    }
    Ok(out)
}

pub fn softmax_row_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = (z - max).exp();
        *o = e;
        sum += e;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_row_into(logits.row(r), out.row_mut(r));
    }
    out
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::dim(
            "labels",
            format!("{rows} rows"),
            format!("{} labels", labels.len()),
        ));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::Label {
            index,
            label,
            classes,
        });
    }
    Ok(())
}

/// Mean of `-ln(max(p[n][label_n], 1e-12))`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> Result<f64> {
    check_labels(labels, probs.rows(), probs.cols())?;
    if labels.is_empty() {
        return Err(Error::Data("cross_entropy of an empty batch".into()));
    }
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(n, &y)| -probs[(n, y)].max(CE_EPSILON).ln())
        .sum();
    Ok(total / labels.len() as f64)
}

pub fn relu(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut RngStream) -> Result<Matrix> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Config(format!(
            "dropout probability {p} not in [0, 1)"
        )));
    }
    let keep = 1.0 / (1.0 - p);
    let mut m = Matrix::zeros(rows, cols);
    for v in m.as_mut_slice() {
        *v = if p > 0.0 && rng.uniform() < p {
            0.0
        } else {
            keep
        };
    }
    Ok(m)
}

/// Loss and `∂loss/∂logits` for mean softmax cross-entropy.
///
/// The gradient is `(softmax(z) - onehot(y)) / N`.
pub fn softmax_cross_entropy_grad(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let probs = softmax(logits);
    let loss = cross_entropy(&probs, labels)?;
    let n = labels.len() as f64;
    let mut grad = probs;
    for (r, &y) in labels.iter().enumerate() {
        grad[(r, y)] -= 1.0;
        for g in grad.row_mut(r) {
            *g /= n;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Backpropagates `grad_out: N×C` through `input · weightsᵀ + bias`.
///
/// Returns the parameter gradients and, when requested, the input gradient.
pub fn linear_backprop(
    input: &Matrix,
    weights: &Matrix,
    grad_out: &Matrix,
    want_input_grad: bool,
) -> (LinearGrads, Option<Matrix>) {
    let (c_out, d_in) = weights.shape();
    let mut gw = Matrix::zeros(c_out, d_in);
    let mut gb = vec![0.0; c_out];
    for n in 0..input.rows() {
        let x = input.row(n);
        let g = grad_out.row(n);
        for c in 0..c_out {
            let gc = g[c];
            if gc == 0.0 {
                continue;
            }
            gb[c] += gc;
            for (w, &xi) in gw.row_mut(c).iter_mut().zip(x) {
                *w += gc * xi;
            }
        }
    }
    let gin = want_input_grad.then(|| {
        let mut gi = Matrix::zeros(input.rows(), d_in);
        for n in 0..input.rows() {
            let g = grad_out.row(n);
            let out = gi.row_mut(n);
            for c in 0..c_out {
                let gc = g[c];
                if gc == 0.0 {
                    continue;
                }
                for (o, &w) in out.iter_mut().zip(weights.row(c)) {
                    *o += gc * w;
                }
            }
        }
        gi
    });
    (
        LinearGrads {
            weights: gw,
            bias: gb,
        },
        gin,
    )
}

/// Loss and exact gradients of a single affine layer under softmax cross-entropy.
pub fn backward_linear(
    input: &Matrix,
    weights: &Matrix,
    bias: &[f64],
    labels: &[usize],
) -> Result<(f64, LinearGrads)> {
    let logits = linear_forward(input, weights, bias)?;
    let (loss, dz) = softmax_cross_entropy_grad(&logits, labels)?;
    let (grads, _) = linear_backprop(input, weights, &dz, false);
    Ok((loss, grads))
}

/// Two-layer network: affine → ReLU → dropout → affine.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub pre_activation: Matrix,
    pub hidden: Matrix,
    pub logits: Matrix,
}

impl MlpParams {
    pub fn hidden_width(&self) -> usize {
        self.w1.rows()
    }

    /// Forward pass. `mask` (N×h) is the dropout mask, `None` in evaluation mode.
    pub fn forward(&self, input: &Matrix, mask: Option<&Matrix>) -> Result<MlpCache> {
        let pre = linear_forward(input, &self.w1, &self.b1)?;
        let mut hidden = relu(&pre);
        if let Some(mask) = mask {
            if mask.shape() != hidden.shape() {
                return Err(Error::dim(
                    "dropout",
                    format!("hidden {}", hidden.shape_string()),
                    format!("mask {}", mask.shape_string()),
                ));
            }
            for (h, &k) in hidden.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *h *= k;
            }
        }
        let logits = linear_forward(&hidden, &self.w2, &self.b2)?;
        Ok(MlpCache {
            pre_activation: pre,
            hidden,
            logits,
        })
    }
}

/// Loss and exact gradients of the two-layer network, through ReLU and the
/// dropout mask when one is given.
pub fn backward_mlp(
    params: &MlpParams,
    input: &Matrix,
    labels: &[usize],
    mask: Option<&Matrix>,
) -> Result<(f64, MlpGrads)> {
    let cache = params.forward(input, mask)?;
    let (loss, dz) = softmax_cross_entropy_grad(&cache.logits, labels)?;
    let (g2, dh) = linear_backprop(&cache.hidden, &params.w2, &dz, true);
    let mut dh = dh.expect("input gradient requested");
    for (i, g) in dh.as_mut_slice().iter_mut().enumerate() {
        let gate = if cache.pre_activation.as_slice()[i] > 0.0 {
            1.0
        } else {
            0.0
        };
        let keep = mask.map_or(1.0, |m| m.as_slice()[i]);
        *g *= gate * keep;
    }
    let (g1, _) = linear_backprop(input, &params.w1, &dh, false);
    Ok((
        loss,
        MlpGrads {
            w1: g1.weights,
            b1: g1.bias,
            w2: g2.weights,
            b2: g2.bias,
        },
    ))
}
