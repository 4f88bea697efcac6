//! Row-major dense kernels with their backward passes.

use super::{LayerNorm, Linear};

pub(crate) const LN_EPS: f64 = 1e-5;

/// `c = beta·c + a·b` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
/// `a_t` / `b_t` read the operand as stored transposed (`k×m` / `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides describe exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn linear_forward(lin: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
    let (n_in, n_out) = (lin.n_in(), lin.n_out());
    let mut y = match &lin.bias {
        Some(b) => b.data.repeat(rows),
        None => vec![0.0; rows * n_out],
    };
    gemm(rows, n_in, n_out, x, false, &lin.weight.data, false, 1.0, &mut y);
    y
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub(crate) fn linear_backward(lin: &Linear, grad: &mut Linear, x: &[f64], dy: &[f64], rows: usize) -> Vec<f64> {
    let (n_in, n_out) = (lin.n_in(), lin.n_out());
    gemm(n_in, rows, n_out, x, true, dy, false, 1.0, &mut grad.weight.data);
    if let Some(gb) = &mut grad.bias {
        for row in dy.chunks_exact(n_out) {
            gb.data.iter_mut().zip(row).for_each(|(g, d)| *g += d);
        }
    }
    let mut dx = vec![0.0; rows * n_in];
    gemm(rows, n_out, n_in, dy, false, &lin.weight.data, true, 0.0, &mut dx);
    dx
}

pub(crate) struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(crate) fn layer_norm_forward(ln: &LayerNorm, x: &[f64], dim: usize) -> (Vec<f64>, LayerNormCache) {
    let rows = x.len() / dim;
    let mut y = vec![0.0; x.len()];
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        rstd[r] = s;
        for c in 0..dim {
            let h = (row[c] - mean) * s;
            xhat[r * dim + c] = h;
            let off = ln.offset.as_ref().map_or(0.0, |o| o.data[c]);
            y[r * dim + c] = h * ln.gain.data[c] + off;
        }
    }
    (y, LayerNormCache { xhat, rstd })
}

pub(crate) fn layer_norm_backward(
    ln: &LayerNorm,
    grad: &mut LayerNorm,
    cache: &LayerNormCache,
    dy: &[f64],
    dim: usize,
) -> Vec<f64> {
    let rows = dy.len() / dim;
    let mut dx = vec![0.0; dy.len()];
    let mut dxhat = vec![0.0; dim];
    for r in 0..rows {
        let span = r * dim..(r + 1) * dim;
        let xhat = &cache.xhat[span.clone()];
        let dyr = &dy[span.clone()];
        for c in 0..dim {
            grad.gain.data[c] += dyr[c] * xhat[c];
            if let Some(go) = &mut grad.offset {
                go.data[c] += dyr[c];
            }
            dxhat[c] = dyr[c] * ln.gain.data[c];
        }
        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
        let mean_dx = dxhat.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
        for c in 0..dim {
            dx[r * dim + c] = cache.rstd[r] * (dxhat[c] - mean_d - xhat[c] * mean_dx);
        }
    }
    dx
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub(crate) fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_K * (u + GELU_C * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}
