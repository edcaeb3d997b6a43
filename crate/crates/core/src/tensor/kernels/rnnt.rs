//! Transducer loss: log-space forward-backward over the (T, U+1) alignment
//! lattice.
//!
//! State (t, u) means t acoustic frames consumed and u target labels
//! emitted. Blank moves (t, u) -> (t+1, u), the label y[u+1] moves
//! (t, u) -> (t, u+1), and every complete alignment ends with the blank at
//! (T-1, U). The loss of one item is -log of the summed probability of all
//! monotonic alignments; the gradient w.r.t. each used lattice entry is the
//! negated posterior probability of its transition.

use crate::tensor::kernels::softmax::log_add_exp;
use crate::tensor::Scalar;

/// Per-item lattice view: `lat[(t * u_stride + u) * v + k]`.
#[derive(Debug, Clone, Copy)]
pub struct LatticeDims {
    /// Number of u slots in the storage (U_max + 1 for padded batches).
    pub u_stride: usize,
    pub vocab: usize,
}

fn idx(d: &LatticeDims, t: usize, u: usize, k: usize) -> usize {
    (t * d.u_stride + u) * d.vocab + k
}

/// Forward DP; returns (alpha, log_prob). `alpha` is (t_valid) x (U+1),
/// row-major, with unreachable states at -inf.
pub fn forward_alpha<T: Scalar>(
    lat: &[T],
    d: &LatticeDims,
    targets: &[usize],
    t_valid: usize,
) -> (Vec<T>, T) {
    let u_len = targets.len();
    let cols = u_len + 1;
    let mut alpha = vec![T::neg_infinity(); t_valid * cols];
    alpha[0] = T::zero();
    for t in 0..t_valid {
        for u in 0..cols {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = T::neg_infinity();
            if t > 0 {
                let a = alpha[(t - 1) * cols + u];
                if a != T::neg_infinity() {
                    acc = log_add_exp(acc, a + lat[idx(d, t - 1, u, 0)]);
                }
            }
            if u > 0 {
                let a = alpha[t * cols + (u - 1)];
                if a != T::neg_infinity() {
                    acc = log_add_exp(acc, a + lat[idx(d, t, u - 1, targets[u - 1])]);
                }
            }
            alpha[t * cols + u] = acc;
        }
    }
    let log_prob = alpha[(t_valid - 1) * cols + u_len] + lat[idx(d, t_valid - 1, u_len, 0)];
    (alpha, log_prob)
}

/// Backward DP: beta(t, u) = log-probability of completing the alignment
/// from (t, u), including the terminal blank.
pub fn backward_beta<T: Scalar>(
    lat: &[T],
    d: &LatticeDims,
    targets: &[usize],
    t_valid: usize,
) -> Vec<T> {
    let u_len = targets.len();
    let cols = u_len + 1;
    let mut beta = vec![T::neg_infinity(); t_valid * cols];
    beta[(t_valid - 1) * cols + u_len] = lat[idx(d, t_valid - 1, u_len, 0)];
    for t in (0..t_valid).rev() {
        for u in (0..cols).rev() {
            if t == t_valid - 1 && u == u_len {
                continue;
            }
            let mut acc = T::neg_infinity();
            if t + 1 < t_valid {
                let b = beta[(t + 1) * cols + u];
                if b != T::neg_infinity() {
                    acc = log_add_exp(acc, lat[idx(d, t, u, 0)] + b);
                }
            }
            if u < u_len {
                let b = beta[t * cols + (u + 1)];
                if b != T::neg_infinity() {
                    acc = log_add_exp(acc, lat[idx(d, t, u, targets[u])] + b);
                }
            }
            beta[t * cols + u] = acc;
        }
    }
    beta
}

/// Accumulate `scale` * d(-log P)/d(lattice) into `dlat` for one item.
/// Entries outside the valid (t, u) region or off the blank/target symbols
/// receive no gradient.
pub fn accumulate_grad<T: Scalar>(
    lat: &[T],
    d: &LatticeDims,
    targets: &[usize],
    t_valid: usize,
    scale: T,
    dlat: &mut [T],
) {
    let u_len = targets.len();
    let cols = u_len + 1;
    let (alpha, log_prob) = forward_alpha(lat, d, targets, t_valid);
    let beta = backward_beta(lat, d, targets, t_valid);
    debug_assert!(
        (beta[0].to_f64_() - log_prob.to_f64_()).abs() < 1e-4 * (1.0 + log_prob.to_f64_().abs()),
        "forward/backward total mismatch: alpha route {} vs beta route {}",
        log_prob,
        beta[0]
    );
    for t in 0..t_valid {
        for u in 0..cols {
            let a = alpha[t * cols + u];
            if a == T::neg_infinity() {
                continue;
            }
            // blank edge
            if t + 1 < t_valid {
                let b = beta[(t + 1) * cols + u];
                if b != T::neg_infinity() {
                    let i = idx(d, t, u, 0);
                    let post = (a + lat[i] + b - log_prob).exp();
                    dlat[i] = dlat[i] - scale * post;
                }
            } else if u == u_len {
                // terminal blank: posterior is exactly 1
                let i = idx(d, t, u, 0);
                let post = (a + lat[i] - log_prob).exp();
                dlat[i] = dlat[i] - scale * post;
            }
            // label edge
            if u < u_len {
                let b = beta[t * cols + (u + 1)];
                if b != T::neg_infinity() {
                    let i = idx(d, t, u, targets[u]);
                    let post = (a + lat[i] + b - log_prob).exp();
                    dlat[i] = dlat[i] - scale * post;
                }
            }
        }
    }
}
