//! Raw numeric kernels shared by the tape ops: matmul variants and the
//! im2col/col2im machinery both convolution directions are built on.
//!
//! Loops are written so the inner dimension walks contiguous memory; with
//! opt-level 3 the compiler vectorizes these without any unsafe code.

use crate::num::Scalar;

/// `c[m,n] = a[m,k] * b[k,n]`, row-major, ikj order.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == T::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (c_v, &b_v) in c_row.iter_mut().zip(b_row) {
                *c_v += a_ip * b_v;
            }
        }
    }
    c
}

/// `c[m,n] = a[m,k] * b[n,k]^T`; both operands are walked along contiguous rows.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (j, c_v) in c_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *c_v = acc;
        }
    }
    c
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Output spatial size of a zero-padded strided convolution.
pub fn conv2d_shape(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// Output spatial size of the transposed convolution (the adjoint geometry).
pub fn convt2d_shape(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h - 1) * stride + kh - 2 * pad, (w - 1) * stride + kw - 2 * pad)
}

/// Unfolds `x[cin,h,w]` into a `[cin*kh*kw, oh*ow]` patch matrix (zero padding).
pub fn im2col<T: Scalar>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (oh, ow) = conv2d_shape(h, w, kh, kw, stride, pad);
    let mut cols = vec![T::zero(); cin * kh * kw * oh * ow];
    for ci in 0..cin {
        let x_plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = &x_plane[iy as usize * w..(iy as usize + 1) * w];
                    let out_row = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    for (ox, out_v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *out_v = x_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds a `[cin*kh*kw, oh*ow]` patch matrix back
/// into an image of shape `[cin,h,w]`.
pub fn col2im<T: Scalar>(
    cols: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let (oh, ow) = conv2d_shape(h, w, kh, kw, stride, pad);
    debug_assert_eq!(cols.len(), cin * kh * kw * oh * ow);
    let mut x = vec![T::zero(); cin * h * w];
    for ci in 0..cin {
        let x_plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let col_row = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let x_row = &mut x_plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in col_row.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let c = matmul::<f64>(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_nt_matches_transposed_matmul() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [0.5f64, -1.0, 2.0, 1.5, 0.0, -2.0]; // 2x3 (treated as transposed)
        let c1 = matmul_nt(&a, &b, 2, 3, 2);
        let bt = transpose(&b, 2, 3);
        let c2 = matmul(&a, &bt, 2, 3, 2);
        assert_eq!(c1, c2);
    }

    #[test]
    fn im2col_identity_kernel_geometry() {
        // 1x1 kernel, stride 1, no pad: cols equals the image itself.
        let x: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let cols = im2col(&x, 1, 3, 4, 1, 1, 1, 0);
        assert_eq!(cols, x);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish fills.
        let (cin, h, w, kh, kw, s, p) = (2usize, 5usize, 4usize, 3usize, 3usize, 2usize, 1usize);
        let x: Vec<f64> = (0..cin * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let (oh, ow) = conv2d_shape(h, w, kh, kw, s, p);
        let y: Vec<f64> = (0..cin * kh * kw * oh * ow)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let cols = im2col(&x, cin, h, w, kh, kw, s, p);
        let back = col2im(&y, cin, h, w, kh, kw, s, p);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
