//! Convolution kernels for the (2+1)D stack, channels-last layout.
//!
//! Inputs are `[N, T, H, W, Cin]`. Spatial convolutions use VALID padding
//! with a configurable stride; temporal convolutions use SAME zero padding
//! and require an odd kernel. Spatial weights are `[kh, kw, Cin, Cout]`,
//! temporal weights `[kt, Cin, Cout]`, both with `Cout` fastest so the
//! inner accumulation runs over contiguous memory.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct SpatialShape {
    pub n: usize,
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
}

impl SpatialShape {
    pub fn out_h(&self) -> usize {
        (self.h - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w - self.kw) / self.stride + 1
    }
}

pub fn conv_spatial_fwd<T: Scalar>(x: &[T], wgt: &[T], bias: Option<&[T]>, s: &SpatialShape) -> Vec<T> {
    let (ho, wo) = (s.out_h(), s.out_w());
    let mut out = vec![T::zero(); s.n * s.t * ho * wo * s.cout];
    if let Some(b) = bias {
        for chunk in out.chunks_exact_mut(s.cout) {
            chunk.copy_from_slice(b);
        }
    }
    for nt in 0..s.n * s.t {
        let x_plane = nt * s.h * s.w * s.cin;
        let o_plane = nt * ho * wo * s.cout;
        for oy in 0..ho {
            for ox in 0..wo {
                let o_base = o_plane + (oy * wo + ox) * s.cout;
                for dy in 0..s.kh {
                    let iy = oy * s.stride + dy;
                    for dx in 0..s.kw {
                        let ix = ox * s.stride + dx;
                        let x_base = x_plane + (iy * s.w + ix) * s.cin;
                        let w_base = (dy * s.kw + dx) * s.cin * s.cout;
                        for ci in 0..s.cin {
                            let xv = x[x_base + ci];
                            let wrow = &wgt[w_base + ci * s.cout..w_base + (ci + 1) * s.cout];
                            let orow = &mut out[o_base..o_base + s.cout];
                            for (o, &w) in orow.iter_mut().zip(wrow) {
                                *o = *o + xv * w;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_spatial_vjp<T: Scalar>(
    x: &[T],
    wgt: &[T],
    dout: &[T],
    s: &SpatialShape,
    mut dx: Option<&mut [T]>,
    mut dwgt: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let (ho, wo) = (s.out_h(), s.out_w());
    if let Some(db) = dbias {
        for chunk in dout.chunks_exact(s.cout) {
            for (d, &g) in db.iter_mut().zip(chunk) {
                *d = *d + g;
            }
        }
    }
    for nt in 0..s.n * s.t {
        let x_plane = nt * s.h * s.w * s.cin;
        let o_plane = nt * ho * wo * s.cout;
        for oy in 0..ho {
            for ox in 0..wo {
                let o_base = o_plane + (oy * wo + ox) * s.cout;
                let g = &dout[o_base..o_base + s.cout];
                for dy in 0..s.kh {
                    let iy = oy * s.stride + dy;
                    for dxk in 0..s.kw {
                        let ix = ox * s.stride + dxk;
                        let x_base = x_plane + (iy * s.w + ix) * s.cin;
                        let w_base = (dy * s.kw + dxk) * s.cin * s.cout;
                        for ci in 0..s.cin {
                            let wrow = &wgt[w_base + ci * s.cout..w_base + (ci + 1) * s.cout];
                            if let Some(dx) = dx.as_deref_mut() {
                                let mut acc = T::zero();
                                for (&gv, &wv) in g.iter().zip(wrow) {
                                    acc = acc + gv * wv;
                                }
                                dx[x_base + ci] = dx[x_base + ci] + acc;
                            }
                            if let Some(dw) = dwgt.as_deref_mut() {
                                let xv = x[x_base + ci];
                                let dwrow = &mut dw[w_base + ci * s.cout..w_base + (ci + 1) * s.cout];
                                for (d, &gv) in dwrow.iter_mut().zip(g) {
                                    *d = *d + xv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalShape {
    pub n: usize,
    pub t: usize,
    /// Collapsed spatial extent (H·W); the kernel does not mix positions.
    pub hw: usize,
    pub cin: usize,
    pub kt: usize,
    pub cout: usize,
}

pub fn conv_temporal_fwd<T: Scalar>(x: &[T], wgt: &[T], bias: Option<&[T]>, s: &TemporalShape) -> Vec<T> {
    assert!(s.kt % 2 == 1, "temporal kernel must be odd for SAME padding");
    let pad = (s.kt - 1) / 2;
    let mut out = vec![T::zero(); s.n * s.t * s.hw * s.cout];
    if let Some(b) = bias {
        for chunk in out.chunks_exact_mut(s.cout) {
            chunk.copy_from_slice(b);
        }
    }
    for n in 0..s.n {
        for t in 0..s.t {
            for dt in 0..s.kt {
                let tt = t + dt;
                if tt < pad || tt - pad >= s.t {
                    continue;
                }
                let tt = tt - pad;
                let x_plane = (n * s.t + tt) * s.hw * s.cin;
                let o_plane = (n * s.t + t) * s.hw * s.cout;
                let w_base = dt * s.cin * s.cout;
                for p in 0..s.hw {
                    let x_base = x_plane + p * s.cin;
                    let o_base = o_plane + p * s.cout;
                    for ci in 0..s.cin {
                        let xv = x[x_base + ci];
                        let wrow = &wgt[w_base + ci * s.cout..w_base + (ci + 1) * s.cout];
                        let orow = &mut out[o_base..o_base + s.cout];
                        for (o, &w) in orow.iter_mut().zip(wrow) {
                            *o = *o + xv * w;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv_temporal_vjp<T: Scalar>(
    x: &[T],
    wgt: &[T],
    dout: &[T],
    s: &TemporalShape,
    mut dx: Option<&mut [T]>,
    mut dwgt: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let pad = (s.kt - 1) / 2;
    if let Some(db) = dbias {
        for chunk in dout.chunks_exact(s.cout) {
            for (d, &g) in db.iter_mut().zip(chunk) {
                *d = *d + g;
            }
        }
    }
    for n in 0..s.n {
        for t in 0..s.t {
            for dt in 0..s.kt {
                let tt = t + dt;
                if tt < pad || tt - pad >= s.t {
                    continue;
                }
                let tt = tt - pad;
                let x_plane = (n * s.t + tt) * s.hw * s.cin;
                let o_plane = (n * s.t + t) * s.hw * s.cout;
                let w_base = dt * s.cin * s.cout;
                for p in 0..s.hw {
                    let x_base = x_plane + p * s.cin;
                    let o_base = o_plane + p * s.cout;
                    let g = &dout[o_base..o_base + s.cout];
                    for ci in 0..s.cin {
                        let wrow = &wgt[w_base + ci * s.cout..w_base + (ci + 1) * s.cout];
                        if let Some(dx) = dx.as_deref_mut() {
                            let mut acc = T::zero();
                            for (&gv, &wv) in g.iter().zip(wrow) {
                                acc = acc + gv * wv;
                            }
                            dx[x_base + ci] = dx[x_base + ci] + acc;
                        }
                        if let Some(dw) = dwgt.as_deref_mut() {
                            let xv = x[x_base + ci];
                            let dwrow = &mut dw[w_base + ci * s.cout..w_base + (ci + 1) * s.cout];
                            for (d, &gv) in dwrow.iter_mut().zip(g) {
                                *d = *d + xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 spatial max pooling, VALID (odd trailing row/column dropped).
/// Returns the pooled buffer plus the flat argmax index per output element;
/// ties resolve to the first element in scan order.
pub fn maxpool2_fwd<T: Scalar>(
    x: &[T],
    n: usize,
    t: usize,
    h: usize,
    w: usize,
    c: usize,
) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![T::zero(); n * t * ho * wo * c];
    let mut arg = vec![0usize; out.len()];
    for nt in 0..n * t {
        let x_plane = nt * h * w * c;
        let o_plane = nt * ho * wo * c;
        for oy in 0..ho {
            for ox in 0..wo {
                let o_base = o_plane + (oy * wo + ox) * c;
                for ch in 0..c {
                    let mut best_idx = x_plane + ((oy * 2) * w + ox * 2) * c + ch;
                    let mut best = x[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = x_plane + ((oy * 2 + dy) * w + ox * 2 + dx) * c + ch;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                    out[o_base + ch] = best;
                    arg[o_base + ch] = best_idx;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_vjp<T: Scalar>(dout: &[T], arg: &[usize], dx: &mut [T]) {
    for (&g, &i) in dout.iter().zip(arg) {
        dx[i] = dx[i] + g;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_valid_arithmetic() {
        let s = SpatialShape { n: 1, t: 1, h: 128, w: 128, cin: 3, kh: 3, kw: 3, cout: 2, stride: 2 };
        assert_eq!(s.out_h(), 63);
        assert_eq!(s.out_w(), 63);
        let s1 = SpatialShape { h: 5, w: 4, stride: 1, ..s };
        assert_eq!(s1.out_h(), 3);
        assert_eq!(s1.out_w(), 2);
    }

    #[test]
    fn spatial_conv_matches_direct_loop() {
        let s = SpatialShape { n: 1, t: 2, h: 4, w: 4, cin: 2, kh: 3, kw: 3, cout: 3, stride: 1 };
        let x: Vec<f64> = (0..s.n * s.t * s.h * s.w * s.cin).map(|i| (i as f64 * 0.37).sin()).collect();
        let wgt: Vec<f64> = (0..s.kh * s.kw * s.cin * s.cout).map(|i| (i as f64 * 0.11).cos()).collect();
        let out = conv_spatial_fwd(&x, &wgt, None, &s);
        // direct per-element oracle
        let (ho, wo) = (s.out_h(), s.out_w());
        for t in 0..s.t {
            for oy in 0..ho {
                for ox in 0..wo {
                    for co in 0..s.cout {
                        let mut want = 0.0;
                        for dy in 0..s.kh {
                            for dx in 0..s.kw {
                                for ci in 0..s.cin {
                                    let xi = ((t * s.h + oy + dy) * s.w + ox + dx) * s.cin + ci;
                                    let wi = ((dy * s.kw + dx) * s.cin + ci) * s.cout + co;
                                    want += x[xi] * wgt[wi];
                                }
                            }
                        }
                        let oi = ((t * ho + oy) * wo + ox) * s.cout + co;
                        assert!((out[oi] - want).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_same_preserves_length() {
        let s = TemporalShape { n: 1, t: 5, hw: 1, cin: 1, kt: 3, cout: 1 };
        let x = vec![1.0f64, 2.0, 3.0, 4.0, 5.0];
        let wgt = vec![0.0, 1.0, 0.0]; // identity tap
        let out = conv_temporal_fwd(&x, &wgt, None, &s);
        assert_eq!(out, x);
        let shift = conv_temporal_fwd(&x, &[1.0, 0.0, 0.0], None, &s);
        assert_eq!(shift, vec![0.0, 1.0, 2.0, 3.0, 4.0]); // zero-padded left
    }

    #[test]
    fn maxpool_drops_odd_trailing_and_picks_first_on_tie() {
        // 3x3 single channel: trailing row/col dropped -> 1x1 out
        let x = vec![5.0f64, 1.0, 9.0, 5.0, 2.0, 9.0, 9.0, 9.0, 9.0];
        let (out, arg) = maxpool2_fwd(&x, 1, 1, 3, 3, 1);
        assert_eq!(out, vec![5.0]);
        assert_eq!(arg, vec![0]); // tie between (0,0) and (1,0); first wins
        let mut dx = vec![0.0; 9];
        maxpool2_vjp(&[2.0], &arg, &mut dx);
        assert_eq!(dx[0], 2.0);
        assert_eq!(dx.iter().sum::<f64>(), 2.0);
    }
}
