//! Row-wise softmax, log-softmax and log-sum-exp over the last dimension,
//! all computed with max-subtraction.

use crate::tensor::Scalar;

pub fn softmax_rows<T: Scalar>(x: &[T], row: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks_exact(row).zip(out.chunks_exact_mut(row)) {
        let m = xr.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for (o, &v) in or.iter_mut().zip(xr) {
            let e = (v - m).exp();
            *o = e;
            denom = denom + e;
        }
        for o in or.iter_mut() {
            *o = *o / denom;
        }
    }
    out
}

/// dx = y ⊙ (dy − Σ dy⊙y), with y the saved softmax output.
pub fn softmax_vjp<T: Scalar>(y: &[T], dy: &[T], row: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(row)
        .zip(dy.chunks_exact(row))
        .zip(dx.chunks_exact_mut(row))
    {
        let mut dot = T::zero();
        for (&yv, &dv) in yr.iter().zip(dyr) {
            dot = dot + yv * dv;
        }
        for ((d, &yv), &dv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = *d + yv * (dv - dot);
        }
    }
}

pub fn log_softmax_rows<T: Scalar>(x: &[T], row: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for (xr, or) in x.chunks_exact(row).zip(out.chunks_exact_mut(row)) {
        let m = xr.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut denom = T::zero();
        for &v in xr {
            denom = denom + (v - m).exp();
        }
        let lse = m + denom.ln();
        for (o, &v) in or.iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

/// dx = dy − softmax(x) · Σ dy, with y the saved log-softmax output.
pub fn log_softmax_vjp<T: Scalar>(y: &[T], dy: &[T], row: usize, dx: &mut [T]) {
    for ((yr, dyr), dxr) in y
        .chunks_exact(row)
        .zip(dy.chunks_exact(row))
        .zip(dx.chunks_exact_mut(row))
    {
        let mut total = T::zero();
        for &dv in dyr {
            total = total + dv;
        }
        for ((d, &yv), &dv) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = *d + dv - yv.exp() * total;
        }
    }
}

/// One value per row: log Σ exp.
pub fn logsumexp_rows<T: Scalar>(x: &[T], row: usize) -> Vec<T> {
    x.chunks_exact(row)
        .map(|xr| {
            let m = xr.iter().cloned().fold(T::neg_infinity(), T::max);
            if !m.is_finite() {
                return m; // all -inf stays -inf; all +inf propagates
            }
            let mut denom = T::zero();
            for &v in xr {
                denom = denom + (v - m).exp();
            }
            m + denom.ln()
        })
        .collect()
}

/// dx[r, k] = softmax(x[r])[k] · dy[r].
pub fn logsumexp_vjp<T: Scalar>(x: &[T], y: &[T], dy: &[T], row: usize, dx: &mut [T]) {
    for (r, (xr, dxr)) in x.chunks_exact(row).zip(dx.chunks_exact_mut(row)).enumerate() {
        let lse = y[r];
        for (d, &v) in dxr.iter_mut().zip(xr) {
            *d = *d + (v - lse).exp() * dy[r];
        }
    }
}

/// Stable log(exp(a) + exp(b)); tolerates -inf on either side.
pub fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}
