//! Row-wise building blocks with their adjoints.

use crate::error::Result;
use crate::numerics::Matrix;

pub(crate) const LN_EPS: f64 = 1e-6;

/// `x · w + b`
pub(crate) fn linear(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    let mut y = x.matmul(w)?;
    y.add_row_broadcast(b.as_slice())?;
    Ok(y)
}

/// Accumulates `∂w`, `∂b` and returns `∂x`.
pub(crate) fn linear_backward(
    x: &Matrix,
    w: &Matrix,
    dy: &Matrix,
    dw: &mut Matrix,
    db: &mut Matrix,
) -> Result<Matrix> {
    dw.add_assign(&x.t_matmul(dy)?)?;
    for (b, s) in db.as_mut_slice().iter_mut().zip(dy.column_sums()) {
        *b += s;
    }
    dy.matmul_t(w)
}

pub(crate) struct LayerNormCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LayerNormCache) {
    let (rows, cols) = x.shape();
    let mut normalized = Matrix::zeros(rows, cols);
    let mut out = Matrix::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for i in 0..rows {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / cols as f64;
        let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..cols {
            let n = (r[j] - mean) * inv;
            normalized[(i, j)] = n;
            out[(i, j)] = n * gain.as_slice()[j] + bias.as_slice()[j];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

pub(crate) fn layer_norm_backward(
    cache: &LayerNormCache,
    gain: &Matrix,
    dy: &Matrix,
    dgain: &mut Matrix,
    dbias: &mut Matrix,
) -> Matrix {
    let (rows, cols) = dy.shape();
    let mut dx = Matrix::zeros(rows, cols);
    let g = gain.as_slice();
    for i in 0..rows {
        let xhat = cache.normalized.row(i);
        let dyr = dy.row(i);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..cols {
            dgain.as_mut_slice()[j] += dyr[j] * xhat[j];
            dbias.as_mut_slice()[j] += dyr[j];
            let d = dyr[j] * g[j];
            mean_d += d;
            mean_dx += d * xhat[j];
        }
        mean_d /= cols as f64;
        mean_dx /= cols as f64;
        let inv = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..cols {
            out[j] = inv * (dyr[j] * g[j] - mean_d - xhat[j] * mean_dx);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn gelu_matrix(x: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| gelu(x[(i, j)]))
}

/// `dy ⊙ gelu′(pre)`
pub(crate) fn gelu_backward(pre: &Matrix, dy: &Matrix) -> Matrix {
    Matrix::from_fn(pre.rows(), pre.cols(), |i, j| dy[(i, j)] * gelu_grad(pre[(i, j)]))
}

/// Row-wise softmax in place.
pub(crate) fn softmax_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Adjoint of [`softmax_rows`] given its output `p`.
pub(crate) fn softmax_rows_backward(p: &Matrix, dp: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for i in 0..p.rows() {
        let pr = p.row(i);
        let dr = dp.row(i);
        let inner: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
        for (o, (a, b)) in out.row_mut(i).iter_mut().zip(pr.iter().zip(dr)) {
            *o = a * (b - inner);
        }
    }
    out
}
