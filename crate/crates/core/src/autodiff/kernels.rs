//! Plain slice kernels shared by the recorded graph ops and the
//! gradient-free inference paths.

use super::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c (+)= op(a) * op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// With `trans_a` the storage of `a` is `k×m` row-major; likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = F::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { F::one() } else { F::zero() };
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
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

/// Row-wise numerically stable log-softmax; sums accumulate in `f64`.
pub fn log_softmax_row<F: Scalar>(x: &[F], out: &mut [F]) {
    let max = x.iter().fold(F::neg_infinity(), |m, &v| m.max(v)).f64();
    let sum: f64 = x.iter().map(|&v| (v.f64() - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = F::of(v.f64() - lse);
    }
}

/// Row softmax computed entirely in `f64`.
pub fn softmax_row_f64<F: Scalar>(x: &[F], out: &mut [f64]) {
    let max = x.iter().fold(F::neg_infinity(), |m, &v| m.max(v)).f64();
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v.f64() - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Layer normalisation of one row. Returns `(mean, rstd)`.
pub fn layer_norm_row<F: Scalar>(x: &[F], gamma: &[F], beta: &[F], out: &mut [F]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().map(|v| v.f64()).sum::<f64>() / d;
    let var = x.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / d;
    let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for j in 0..x.len() {
        let xhat = (x[j].f64() - mean) * rstd;
        out[j] = F::of(xhat * gamma[j].f64() + beta[j].f64());
    }
    (mean, rstd)
}

pub fn relu_inplace<F: Scalar>(x: &mut [F]) {
    for v in x {
        if *v < F::zero() {
            *v = F::zero();
        }
    }
}

pub fn add_bias_rows<F: Scalar>(x: &mut [F], bias: &[F]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v = *v + b;
        }
    }
}

pub fn all_finite<F: Scalar>(x: &[F]) -> bool {
    x.iter().all(|v| v.is_finite())
}
