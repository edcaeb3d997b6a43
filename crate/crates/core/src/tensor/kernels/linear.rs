//! Dense projection over the last dimension plus the small structured ops
//! used by the transducer joint (outer sum) and the prediction network
//! (embedding lookup).

use crate::tensor::Scalar;

/// out[r, :] = x[r, :] @ w + b, rows over all leading dims. w is [k, n].
pub fn linear_fwd<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, k: usize, n: usize) -> Vec<T> {
    let rows = x.len() / k;
    let mut out = vec![T::zero(); rows * n];
    if let Some(b) = b {
        for chunk in out.chunks_exact_mut(n) {
            chunk.copy_from_slice(b);
        }
    }
    for (xr, or) in x.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (ki, &xv) in xr.iter().enumerate() {
            let wrow = &w[ki * n..(ki + 1) * n];
            for (o, &wv) in or.iter_mut().zip(wrow) {
                *o = *o + xv * wv;
            }
        }
    }
    out
}

pub fn linear_vjp<T: Scalar>(
    x: &[T],
    w: &[T],
    dout: &[T],
    k: usize,
    n: usize,
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    if let Some(db) = dbias {
        for chunk in dout.chunks_exact(n) {
            for (d, &g) in db.iter_mut().zip(chunk) {
                *d = *d + g;
            }
        }
    }
    let rows = x.len() / k;
    for r in 0..rows {
        let xr = &x[r * k..(r + 1) * k];
        let gr = &dout[r * n..(r + 1) * n];
        if let Some(dx) = dx.as_deref_mut() {
            let dxr = &mut dx[r * k..(r + 1) * k];
            for (ki, d) in dxr.iter_mut().enumerate() {
                let wrow = &w[ki * n..(ki + 1) * n];
                let mut acc = T::zero();
                for (&gv, &wv) in gr.iter().zip(wrow) {
                    acc = acc + gv * wv;
                }
                *d = *d + acc;
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            for (ki, &xv) in xr.iter().enumerate() {
                let dwrow = &mut dw[ki * n..(ki + 1) * n];
                for (d, &gv) in dwrow.iter_mut().zip(gr) {
                    *d = *d + xv * gv;
                }
            }
        }
    }
}

/// out[b, t, u, :] = a[b, t, :] + c[b, u, :]
pub fn outer_sum_fwd<T: Scalar>(a: &[T], c: &[T], bsz: usize, t: usize, u: usize, j: usize) -> Vec<T> {
    let mut out = vec![T::zero(); bsz * t * u * j];
    for b in 0..bsz {
        for ti in 0..t {
            let ar = &a[(b * t + ti) * j..(b * t + ti + 1) * j];
            for ui in 0..u {
                let cr = &c[(b * u + ui) * j..(b * u + ui + 1) * j];
                let or = &mut out[((b * t + ti) * u + ui) * j..((b * t + ti) * u + ui + 1) * j];
                for ((o, &av), &cv) in or.iter_mut().zip(ar).zip(cr) {
                    *o = av + cv;
                }
            }
        }
    }
    out
}

pub fn outer_sum_vjp<T: Scalar>(
    dout: &[T],
    bsz: usize,
    t: usize,
    u: usize,
    j: usize,
    mut da: Option<&mut [T]>,
    mut dc: Option<&mut [T]>,
) {
    for b in 0..bsz {
        for ti in 0..t {
            for ui in 0..u {
                let gr = &dout[((b * t + ti) * u + ui) * j..((b * t + ti) * u + ui + 1) * j];
                if let Some(da) = da.as_deref_mut() {
                    let dar = &mut da[(b * t + ti) * j..(b * t + ti + 1) * j];
                    for (d, &g) in dar.iter_mut().zip(gr) {
                        *d = *d + g;
                    }
                }
                if let Some(dc) = dc.as_deref_mut() {
                    let dcr = &mut dc[(b * u + ui) * j..(b * u + ui + 1) * j];
                    for (d, &g) in dcr.iter_mut().zip(gr) {
                        *d = *d + g;
                    }
                }
            }
        }
    }
}

/// Row gather: out[i, :] = table[ids[i], :].
pub fn embed_fwd<T: Scalar>(table: &[T], width: usize, ids: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(ids.len() * width);
    for &id in ids {
        out.extend_from_slice(&table[id * width..(id + 1) * width]);
    }
    out
}

/// Scatter-add rows of dout back into the table gradient.
pub fn embed_vjp<T: Scalar>(dout: &[T], width: usize, ids: &[usize], dtable: &mut [T]) {
    for (i, &id) in ids.iter().enumerate() {
        let gr = &dout[i * width..(i + 1) * width];
        let dr = &mut dtable[id * width..(id + 1) * width];
        for (d, &g) in dr.iter_mut().zip(gr) {
            *d = *d + g;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_manual_matmul() {
        // x: 2x3, w: 3x2, b: [10, 20]
        let x = vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let w = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let b = vec![10.0, 20.0];
        let out = linear_fwd(&x, &w, Some(&b), 3, 2);
        assert_eq!(out, vec![14.0, 25.0, 20.0, 31.0]);
    }

    #[test]
    fn outer_sum_shapes_and_values() {
        let a = vec![1.0f64, 2.0, 3.0, 4.0]; // b=1, t=2, j=2
        let c = vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0]; // b=1, u=3, j=2
        let out = outer_sum_fwd(&a, &c, 1, 2, 3, 2);
        assert_eq!(out.len(), 12);
        assert_eq!(out[0], 11.0); // t0,u0: 1+10
        assert_eq!(out[11], 64.0); // t1,u2: 4+60
    }

    #[test]
    fn embed_gathers_and_scatters() {
        let table = vec![0.0f64, 0.0, 1.0, 2.0, 3.0, 4.0]; // 3 rows, width 2
        let out = embed_fwd(&table, 2, &[2, 0, 2]);
        assert_eq!(out, vec![3.0, 4.0, 0.0, 0.0, 3.0, 4.0]);
        let mut dt = vec![0.0; 6];
        embed_vjp(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0], 2, &[2, 0, 2], &mut dt);
        assert_eq!(dt, vec![1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }
}
