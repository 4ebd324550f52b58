//! Row-wise building blocks shared by the forward and backward passes.

use super::scalar::{matmul, Op, Scalar};

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over rows of width `d`. Writes output plus per-row mean and
/// reciprocal standard deviation.
pub fn layer_norm<F: Scalar>(
    x: &[F],
    d: usize,
    g: &[F],
    b: &[F],
    out: &mut [F],
    mean: &mut [F],
    rstd: &mut [F],
) {
    let eps = F::from_f64_lossy(LN_EPS);
    let inv_d = F::one() / F::from_usize(d).unwrap();
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mu = row.iter().fold(F::zero(), |a, &v| a + v) * inv_d;
        let var = row.iter().fold(F::zero(), |a, &v| a + (v - mu) * (v - mu)) * inv_d;
        let rs = F::one() / (var + eps).sqrt();
        mean[r] = mu;
        rstd[r] = rs;
        let o = &mut out[r * d..(r + 1) * d];
        for i in 0..d {
            o[i] = (row[i] - mu) * rs * g[i] + b[i];
        }
    }
}

/// Backward of [`layer_norm`]: accumulates into `dx`, `dg`, `db`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<F: Scalar>(
    dy: &[F],
    x: &[F],
    d: usize,
    g: &[F],
    mean: &[F],
    rstd: &[F],
    dx: &mut [F],
    dg: &mut [F],
    db: &mut [F],
) {
    let inv_d = F::one() / F::from_usize(d).unwrap();
    let mut xhat = vec![F::zero(); d];
    let mut dxhat = vec![F::zero(); d];
    for (r, (dyr, xr)) in dy.chunks_exact(d).zip(x.chunks_exact(d)).enumerate() {
        let (mu, rs) = (mean[r], rstd[r]);
        let mut sum_dxhat = F::zero();
        let mut sum_dxhat_xhat = F::zero();
        for i in 0..d {
            xhat[i] = (xr[i] - mu) * rs;
            dxhat[i] = dyr[i] * g[i];
            dg[i] += dyr[i] * xhat[i];
            db[i] += dyr[i];
            sum_dxhat += dxhat[i];
            sum_dxhat_xhat += dxhat[i] * xhat[i];
        }
        let dxr = &mut dx[r * d..(r + 1) * d];
        for i in 0..d {
            dxr[i] += rs * (dxhat[i] - sum_dxhat * inv_d - xhat[i] * sum_dxhat_xhat * inv_d);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `0.5 (1 + tanh(u))` written as the logistic `1 / (1 + e^{-2u})`, which
/// avoids a costly `tanh`.
fn gelu_gate<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let two = F::from_f64_lossy(2.0);
    F::one() / (F::one() + (-two * c * (x + a * x * x * x)).exp())
}

/// Tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    x * gelu_gate(x)
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let two = F::from_f64_lossy(2.0);
    let three = F::from_f64_lossy(3.0);
    let s = gelu_gate(x);
    s + two * x * s * (F::one() - s) * c * (F::one() + three * a * x * x)
}

/// `out[n, o] = x[n, i] · w[i, o] + bias`.
pub fn linear<F: Scalar>(x: &[F], n: usize, w: &[F], bias: &[F], i: usize, o: usize, out: &mut [F]) {
    matmul(n, i, o, x, Op::N, w, Op::N, F::zero(), out);
    for row in out[..n * o].chunks_exact_mut(o) {
        for (v, &bv) in row.iter_mut().zip(bias) {
            *v += bv;
        }
    }
}

/// Backward of [`linear`]: `dx += dy · wᵀ` (when `dx` is given),
/// `dw += xᵀ · dy`, `db += Σ_rows dy`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<F: Scalar>(
    dy: &[F],
    x: &[F],
    n: usize,
    w: &[F],
    i: usize,
    o: usize,
    dx: Option<&mut [F]>,
    dw: &mut [F],
    db: &mut [F],
) {
    if let Some(dx) = dx {
        matmul(n, o, i, dy, Op::N, w, Op::T, F::one(), dx);
    }
    matmul(i, n, o, x, Op::T, dy, Op::N, F::one(), dw);
    for row in dy[..n * o].chunks_exact(o) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
}

/// Numerically stable softmax into `out`.
pub fn softmax<F: Scalar>(logits: &[F], out: &mut [F]) {
    let max = logits.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut sum = F::zero();
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `log softmax(z)[target]`.
pub fn log_softmax_at<F: Scalar>(logits: &[F], target: usize) -> F {
    let max = logits.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let lse = logits.iter().fold(F::zero(), |s, &v| s + (v - max).exp()).ln() + max;
    logits[target] - lse
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<F: Scalar>(values: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
