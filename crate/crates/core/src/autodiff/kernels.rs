//! Raw numeric kernels shared by forward and backward passes.

/// `c (+)= op(a) · op(b)` with `op(a)` of shape `[m, k]` and `op(b)` of shape `[k, n]`.
///
/// `a_t` means `a` is stored as `[k, m]`; `b_t` means `b` is stored as `[n, k]`.
/// `c` is row-major `[m, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the strides
    // above address a dense row-major (or transposed) layout within them.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfold `x[B,Cin,H,W]` into columns `[Cin*kh*kw, B*Ho*Wo]`.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols_n = g.batch * g.spatial_out();
    let mut cols = vec![0.0; g.patch() * cols_n];
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let src = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let base = b * g.spatial_out() + oy * g.wo;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add columns back into `dx[B,Cin,H,W]`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let cols_n = g.batch * g.spatial_out();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = b * g.spatial_out() + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copy `x` (shape `shape`) into the layout given by permuting its axes with `perm`.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.len();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(x[offset]);
        // odometer increment over the output index
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = c * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for (x, y) in c.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
        // transposed storage of the same operands
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, false);
        for (x, y) in c2.iter().zip(&naive) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_transposes_matrix() {
        let x: Vec<f64> = (0..6).map(f64::from).collect();
        let (shape, out) = permute(&x, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn sigmoid_is_symmetric() {
        for x in [0.1, 1.0, 3.0, 20.0, 800.0] {
            assert!((sigmoid(x) + sigmoid(-x) - 1.0).abs() < 1e-15);
        }
    }
}
