//! Group normalization (per time step, over spatial positions and the
//! channels of each group) and last-dim layer normalization.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GroupNormShape {
    pub n: usize,
    pub t: usize,
    pub hw: usize,
    pub c: usize,
    pub groups: usize,
}

impl GroupNormShape {
    pub fn group_size(&self) -> usize {
        self.c / self.groups
    }
    pub fn stat_count(&self) -> usize {
        self.n * self.t * self.groups
    }
}

/// Returns (y, mean, invstd); mean/invstd are per (n, t, group).
pub fn group_norm_fwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    s: &GroupNormShape,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cg = s.group_size();
    let count = T::from_f64((s.hw * cg) as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut means = vec![T::zero(); s.stat_count()];
    let mut invstds = vec![T::zero(); s.stat_count()];
    for nt in 0..s.n * s.t {
        let plane = nt * s.hw * s.c;
        for g in 0..s.groups {
            let c0 = g * cg;
            let mut sum = T::zero();
            for p in 0..s.hw {
                let base = plane + p * s.c + c0;
                for c in 0..cg {
                    sum = sum + x[base + c];
                }
            }
            let mean = sum / count;
            let mut var = T::zero();
            for p in 0..s.hw {
                let base = plane + p * s.c + c0;
                for c in 0..cg {
                    let d = x[base + c] - mean;
                    var = var + d * d;
                }
            }
            var = var / count;
            let invstd = T::one() / (var + eps).sqrt();
            means[nt * s.groups + g] = mean;
            invstds[nt * s.groups + g] = invstd;
            for p in 0..s.hw {
                let base = plane + p * s.c + c0;
                for c in 0..cg {
                    let xhat = (x[base + c] - mean) * invstd;
                    y[base + c] = gamma[c0 + c] * xhat + beta[c0 + c];
                }
            }
        }
    }
    (y, means, invstds)
}

#[allow(clippy::too_many_arguments)]
pub fn group_norm_vjp<T: Scalar>(
    x: &[T],
    gamma: &[T],
    dout: &[T],
    means: &[T],
    invstds: &[T],
    s: &GroupNormShape,
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let cg = s.group_size();
    let count = T::from_f64((s.hw * cg) as f64);
    for nt in 0..s.n * s.t {
        let plane = nt * s.hw * s.c;
        for g in 0..s.groups {
            let c0 = g * cg;
            let mean = means[nt * s.groups + g];
            let invstd = invstds[nt * s.groups + g];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for p in 0..s.hw {
                let base = plane + p * s.c + c0;
                for c in 0..cg {
                    let xhat = (x[base + c] - mean) * invstd;
                    let dy = dout[base + c];
                    let dxhat = dy * gamma[c0 + c];
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                    if let Some(dg) = dgamma.as_deref_mut() {
                        dg[c0 + c] = dg[c0 + c] + dy * xhat;
                    }
                    if let Some(db) = dbeta.as_deref_mut() {
                        db[c0 + c] = db[c0 + c] + dy;
                    }
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                let mean_dxhat = sum_dxhat / count;
                let mean_dxhat_xhat = sum_dxhat_xhat / count;
                for p in 0..s.hw {
                    let base = plane + p * s.c + c0;
                    for c in 0..cg {
                        let xhat = (x[base + c] - mean) * invstd;
                        let dxhat = dout[base + c] * gamma[c0 + c];
                        dx[base + c] =
                            dx[base + c] + invstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
            }
        }
    }
}

/// Layer norm over rows of width `d`. Returns (y, mean, invstd) per row.
pub fn layer_norm_fwd<T: Scalar>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    d: usize,
    eps: T,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let count = T::from_f64(d as f64);
    let mut y = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut invstds = Vec::with_capacity(rows);
    for (xr, yr) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mut sum = T::zero();
        for &v in xr {
            sum = sum + v;
        }
        let mean = sum / count;
        let mut var = T::zero();
        for &v in xr {
            let diff = v - mean;
            var = var + diff * diff;
        }
        let invstd = T::one() / (var / count + eps).sqrt();
        for ((o, &v), (&g, &b)) in yr.iter_mut().zip(xr).zip(gamma.iter().zip(beta)) {
            *o = g * (v - mean) * invstd + b;
        }
        means.push(mean);
        invstds.push(invstd);
    }
    (y, means, invstds)
}

#[allow(clippy::too_many_arguments)]
pub fn layer_norm_vjp<T: Scalar>(
    x: &[T],
    gamma: &[T],
    dout: &[T],
    means: &[T],
    invstds: &[T],
    d: usize,
    mut dx: Option<&mut [T]>,
    mut dgamma: Option<&mut [T]>,
    mut dbeta: Option<&mut [T]>,
) {
    let count = T::from_f64(d as f64);
    for (r, (xr, dyr)) in x.chunks_exact(d).zip(dout.chunks_exact(d)).enumerate() {
        let mean = means[r];
        let invstd = invstds[r];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for (c, (&v, &dy)) in xr.iter().zip(dyr).enumerate() {
            let xhat = (v - mean) * invstd;
            let dxhat = dy * gamma[c];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            if let Some(dg) = dgamma.as_deref_mut() {
                dg[c] = dg[c] + dy * xhat;
            }
            if let Some(db) = dbeta.as_deref_mut() {
                db[c] = db[c] + dy;
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dxr = &mut dx[r * d..(r + 1) * d];
            for (c, (&v, &dy)) in xr.iter().zip(dyr).enumerate() {
                let xhat = (v - mean) * invstd;
                let dxhat = dy * gamma[c];
                dxr[c] = dxr[c]
                    + invstd * (dxhat - sum_dxhat / count - xhat * sum_dxhat_xhat / count);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;
    use rand::Rng;

    #[test]
    fn constant_input_identity_affine_gives_zero() {
        let s = GroupNormShape { n: 1, t: 2, hw: 4, c: 6, groups: 2 };
        let x = vec![3.7f64; 2 * 4 * 6];
        let gamma = vec![1.0; 6];
        let beta = vec![0.0; 6];
        let (y, _, _) = group_norm_fwd(&x, &gamma, &beta, &s, 1e-5);
        for v in y {
            assert!(v.abs() < 1e-9, "constant input left residual {v}");
        }
        // All-zeros input normalizes to exactly zero (mean is exact).
        let zeros = vec![0.0f64; 2 * 4 * 6];
        let (y, _, _) = group_norm_fwd(&zeros, &gamma, &beta, &s, 1e-5);
        for v in y {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn one_group_equals_joint_normalization() {
        let mut rng = rng_for(3, &[1]);
        let s = GroupNormShape { n: 1, t: 1, hw: 5, c: 4, groups: 1 };
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gamma = vec![1.0; 4];
        let beta = vec![0.0; 4];
        let (y, _, _) = group_norm_fwd(&x, &gamma, &beta, &s, 1e-12);
        let mean = x.iter().sum::<f64>() / 20.0;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20.0;
        for (yv, xv) in y.iter().zip(&x) {
            assert!((yv - (xv - mean) / (var + 1e-12).sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn two_group_stats_match_direct_loop() {
        let mut rng = rng_for(4, &[1]);
        let s = GroupNormShape { n: 2, t: 1, hw: 3, c: 4, groups: 2 };
        let x: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma = vec![1.5, 0.5, 2.0, 1.0];
        let beta = vec![0.1, -0.2, 0.0, 0.3];
        let (y, _, _) = group_norm_fwd(&x, &gamma, &beta, &s, 1e-5);
        // direct oracle per (n, group)
        for n in 0..2 {
            for g in 0..2 {
                let mut vals = Vec::new();
                for p in 0..3 {
                    for c in 0..2 {
                        vals.push(x[n * 12 + p * 4 + g * 2 + c]);
                    }
                }
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
                for p in 0..3 {
                    for c in 0..2 {
                        let ch = g * 2 + c;
                        let xv = x[n * 12 + p * 4 + ch];
                        let want = gamma[ch] * (xv - mean) / (var + 1e-5).sqrt() + beta[ch];
                        let got = y[n * 12 + p * 4 + ch];
                        assert!((got - want).abs() < 1e-6, "got {got} want {want}");
                    }
                }
            }
        }
    }
}
