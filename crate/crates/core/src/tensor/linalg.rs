//! Dense kernels behind the tape ops.
//!
//! The 2D multiply is delegated to `matrixmultiply::dgemm`; transposed
//! operands are expressed through strides so backward passes never
//! materialize a transpose.

/// c += alpha * op(a) @ op(b), row-major, with optional logical transposes.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Lower a padded image into patch rows: out[(oy*wo+ox), (c*kh+dy)*kw+dx] =
/// x[c, oy*stride+dy-pad, ox*stride+dx-pad], zero outside.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(out.len(), ho * wo * channels * kh * kw);
    let row_len = channels * kh * kw;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut out[(oy * wo + ox) * row_len..(oy * wo + ox + 1) * row_len];
            let mut idx = 0;
            for c in 0..channels {
                let plane = &x[c * h * w..(c + 1) * h * w];
                for dy in 0..kh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    for dx in 0..kw {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        row[idx] = if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize]
                        } else {
                            0.0
                        };
                        idx += 1;
                    }
                }
            }
        }
    }
}

/// Scatter-add patch-row gradients back to image layout (adjoint of im2col).
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    cols: &[f64],
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out: &mut [f64],
) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let row_len = channels * kh * kw;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * row_len..(oy * wo + ox + 1) * row_len];
            let mut idx = 0;
            for c in 0..channels {
                for dy in 0..kh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    for dx in 0..kw {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            out[c * h * w + iy as usize * w + ix as usize] += row[idx];
                        }
                        idx += 1;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_identity() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut c = vec![0.0; 6];
        gemm(3, 3, 2, 1.0, &eye, false, &x, false, 0.0, &mut c);
        assert_eq!(c, x);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], aᵀ@a = [[10,14],[14,20]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let mut c = vec![0.0; 4];
        gemm(2, 2, 2, 1.0, &a, true, &a, false, 0.0, &mut c);
        assert_eq!(c, vec![10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y
        let mut rng = crate::rng::Rng::from_seed(5);
        let (c, h, w, kh, kw, s, p) = (2, 5, 4, 3, 3, 2, 1);
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (w + 2 * p - kw) / s + 1;
        let x: Vec<f64> = (0..c * h * w).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..ho * wo * c * kh * kw).map(|_| rng.normal()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, kh, kw, s, p, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, kh, kw, s, p, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }
}
