//! Raw numeric kernels shared by the graph operators and the self-tuning
//! simulation. Everything here works on flat row-major slices.
//!
//! Convolution is cross-correlation (no kernel flip) computed as im2col + GEMM.
//! The column buffer is laid out per sample as `[n][c*kh*kw][oy*ow]`.

use serde::{Deserialize, Serialize};

use crate::tensor::Real;

/// Geometry of a 2-D convolution with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let hp = h + 2 * self.pad;
        let wp = w + 2 * self.pad;
        if self.stride == 0 || hp < self.kernel || wp < self.kernel {
            return None;
        }
        Some(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }

    /// Rows of the unrolled patch matrix, i.e. the MVM input length.
    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

/// `(m,k) x (k,n) -> (m,n)`.
pub fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::ZERO; m * n];
    T::gemm(m, k, n, T::ONE, a, k as isize, 1, b, n as isize, 1, T::ZERO, &mut c, n as isize, 1);
    c
}

/// `x (n,in) . w^T` with `w (out,in)`.
pub fn linear_forward<T: Real>(x: &[T], w: &[T], n: usize, d_in: usize, d_out: usize) -> Vec<T> {
    let mut y = vec![T::ZERO; n * d_out];
    T::gemm(n, d_in, d_out, T::ONE, x, d_in as isize, 1, w, 1, d_in as isize, T::ZERO, &mut y, d_out as isize, 1);
    y
}

/// Returns `(dx, dw)` for `y = x . w^T`.
pub fn linear_backward<T: Real>(dy: &[T], x: &[T], w: &[T], n: usize, d_in: usize, d_out: usize) -> (Vec<T>, Vec<T>) {
    let mut dx = vec![T::ZERO; n * d_in];
    T::gemm(n, d_out, d_in, T::ONE, dy, d_out as isize, 1, w, d_in as isize, 1, T::ZERO, &mut dx, d_in as isize, 1);
    let mut dw = vec![T::ZERO; d_out * d_in];
    T::gemm(d_out, n, d_in, T::ONE, dy, 1, d_out as isize, x, d_in as isize, 1, T::ZERO, &mut dw, d_in as isize, 1);
    (dx, dw)
}

/// Output columns `lo..hi` whose input column `ox * stride + kj - pad` lies in `0..w`.
fn valid_range(kj: usize, g: &ConvGeom, w: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kj).div_ceil(g.stride);
    let hi = if w + g.pad > kj { ((w + g.pad - kj - 1) / g.stride + 1).min(ow) } else { 0 };
    (lo.min(hi), hi)
}

/// Unrolls `x (n,c,h,w)` into per-sample patch matrices.
pub fn im2col<T: Real>(x: &[T], n: usize, h: usize, w: usize, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw(h, w).expect("validated geometry");
    let k = g.kernel;
    let p = oh * ow;
    let kk = g.patch_len();
    let mut cols = vec![T::ZERO; n * kk * p];
    for s in 0..n {
        let xs = &x[s * g.in_ch * h * w..(s + 1) * g.in_ch * h * w];
        let cs = &mut cols[s * kk * p..(s + 1) * kk * p];
        for c in 0..g.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cs[row * p..(row + 1) * p];
                    let (lo, hi) = valid_range(kj, g, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &xs[c * h * w + iy as usize * w..c * h * w + (iy as usize + 1) * w];
                        let d = &mut dst[oy * ow..(oy + 1) * ow];
                        if g.stride == 1 {
                            let off = lo + kj - g.pad;
                            d[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        } else {
                            for ox in lo..hi {
                                d[ox] = src[ox * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Real>(cols: &[T], n: usize, h: usize, w: usize, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw(h, w).expect("validated geometry");
    let k = g.kernel;
    let p = oh * ow;
    let kk = g.patch_len();
    let mut x = vec![T::ZERO; n * g.in_ch * h * w];
    for s in 0..n {
        let xs = &mut x[s * g.in_ch * h * w..(s + 1) * g.in_ch * h * w];
        let cs = &cols[s * kk * p..(s + 1) * kk * p];
        for c in 0..g.in_ch {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cs[row * p..(row + 1) * p];
                    let (lo, hi) = valid_range(kj, g, w, ow);
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &mut xs[c * h * w + iy as usize * w..c * h * w + (iy as usize + 1) * w];
                        let s = &src[oy * ow..(oy + 1) * ow];
                        for ox in lo..hi {
                            row[ox * g.stride + kj - g.pad] += s[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `w (oc, kk)` applied to precomputed columns; output `(n, oc, p)`.
pub fn conv_from_cols<T: Real>(cols: &[T], w: &[T], n: usize, oc: usize, kk: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; n * oc * p];
    for s in 0..n {
        T::gemm(
            oc,
            kk,
            p,
            T::ONE,
            w,
            kk as isize,
            1,
            &cols[s * kk * p..],
            p as isize,
            1,
            T::ZERO,
            &mut out[s * oc * p..],
            p as isize,
            1,
        );
    }
    out
}

/// Returns `(dcols, dw)` for [`conv_from_cols`].
pub fn conv_backward_cols<T: Real>(
    dout: &[T],
    cols: &[T],
    w: &[T],
    n: usize,
    oc: usize,
    kk: usize,
    p: usize,
) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::ZERO; oc * kk];
    let mut dcols = vec![T::ZERO; n * kk * p];
    for s in 0..n {
        let ds = &dout[s * oc * p..];
        // dw += dout_s (oc,p) . cols_s^T (p,kk)
        T::gemm(
            oc,
            p,
            kk,
            T::ONE,
            ds,
            p as isize,
            1,
            &cols[s * kk * p..],
            1,
            p as isize,
            T::ONE,
            &mut dw,
            kk as isize,
            1,
        );
        // dcols_s (kk,p) = w^T (kk,oc) . dout_s (oc,p)
        T::gemm(
            kk,
            oc,
            p,
            T::ONE,
            w,
            1,
            kk as isize,
            ds,
            p as isize,
            1,
            T::ZERO,
            &mut dcols[s * kk * p..],
            p as isize,
            1,
        );
    }
    (dcols, dw)
}

/// Non-overlapping max pooling over `(planes, h, w)`. Returns values and the
/// flat input index chosen for each output.
pub fn maxpool<T: Real>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * k + dy) * w + ox * k + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn avgpool<T: Real>(x: &[T], planes: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::from_f64(1.0 / (k * k) as f64);
    let mut out = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::ZERO;
                for dy in 0..k {
                    for dx in 0..k {
                        s += x[base + (oy * k + dy) * w + ox * k + dx];
                    }
                }
                out.push(s * inv);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], wt: &[f64], n: usize, h: usize, w: usize, g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = g.out_hw(h, w).unwrap();
        let mut out = vec![0.0; n * g.out_ch * oh * ow];
        for s in 0..n {
            for o in 0..g.out_ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..g.in_ch {
                            for ki in 0..g.kernel {
                                for kj in 0..g.kernel {
                                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += x[((s * g.in_ch + c) * h + iy as usize) * w + ix as usize]
                                        * wt[((o * g.in_ch + c) * g.kernel + ki) * g.kernel + kj];
                                }
                            }
                        }
                        out[((s * g.out_ch + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_cross_correlation() {
        let g = ConvGeom { in_ch: 2, out_ch: 3, kernel: 3, stride: 2, pad: 1 };
        let (n, h, w) = (2, 7, 6);
        let x: Vec<f64> = (0..n * 2 * h * w).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let wt: Vec<f64> = (0..3 * g.patch_len()).map(|i| ((i * 13) % 7) as f64 * 0.5 - 1.0).collect();
        let (oh, ow) = g.out_hw(h, w).unwrap();
        let cols = im2col(&x, n, h, w, &g);
        let got = conv_from_cols(&cols, &wt, n, 3, g.patch_len(), oh * ow);
        assert_eq!(got, naive_conv(&x, &wt, n, h, w, &g));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom { in_ch: 2, out_ch: 1, kernel: 3, stride: 1, pad: 1 };
        let (n, h, w) = (2, 5, 4);
        let x: Vec<f64> = (0..n * 2 * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, n, h, w, &g);
        let c: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let back = col2im(&c, n, h, w, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }

    #[test]
    fn linear_matches_matmul_with_transpose() {
        let (n, di, d_o) = (3, 4, 2);
        let x: Vec<f64> = (0..n * di).map(|i| i as f64).collect();
        let w: Vec<f64> = (0..d_o * di).map(|i| 1.0 - i as f64 * 0.25).collect();
        let mut wt = vec![0.0; di * d_o];
        for o in 0..d_o {
            for i in 0..di {
                wt[i * d_o + o] = w[o * di + i];
            }
        }
        assert_eq!(linear_forward(&x, &w, n, di, d_o), matmul(&x, &wt, n, di, d_o));
    }

    #[test]
    fn maxpool_picks_window_maximum() {
        let x = [1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 9.0, 8.0];
        let (v, arg) = maxpool(&x, 1, 2, 4, 2);
        assert_eq!(v, vec![5.0, 9.0]);
        assert_eq!(arg, vec![1, 6]);
        assert_eq!(avgpool(&x, 1, 2, 4, 2), vec![3.25, 4.75]);
    }
}
