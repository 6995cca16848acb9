//! Low-level numeric kernels: im2col/col2im and a thin sgemm wrapper.

/// Geometry of a 2-D sliding window over a `c × h × w` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Rows of the column matrix.
    pub fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn positions(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `off`.
    fn valid(&self, off: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = off as isize - self.pad as isize;
        // need 0 <= o*s + shift < extent
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi = (extent as isize - 1 - shift).div_euclid(s) + 1;
        let lo = lo.max(0) as usize;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo.min(hi), hi)
    }
}

/// Unfold `x` (c × h × w) into a `(c·k·k) × (oh·ow)` column matrix.
pub(crate) fn im2col(x: &[f32], g: &Window, cols: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * n);
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (ylo, yhi) = g.valid(ki, g.h, oh);
            for kj in 0..g.k {
                let (xlo, xhi) = g.valid(kj, g.w, ow);
                let row = ((c * g.k + ki) * g.k + kj) * n;
                let dst = &mut cols[row..row + n];
                dst.fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let ix0 = xlo + kj - g.pad;
                        d[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            d[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Fold a column matrix back onto `x`, accumulating overlapping patches.
pub(crate) fn col2im(cols: &[f32], g: &Window, x: &mut [f32]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let n = oh * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * n);
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            let (ylo, yhi) = g.valid(ki, g.h, oh);
            for kj in 0..g.k {
                let (xlo, xhi) = g.valid(kj, g.w, ow);
                let row = ((c * g.k + ki) * g.k + kj) * n;
                let src = &cols[row..row + n];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s = &src[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        let ix0 = xlo + kj - g.pad;
                        for (d, v) in dst[ix0..ix0 + (xhi - xlo)].iter_mut().zip(&s[xlo..xhi]) {
                            *d += *v;
                        }
                    } else {
                        for ox in xlo..xhi {
                            dst[ox * g.stride + kj - g.pad] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major matrix operand; `trans` means the buffer stores the transpose.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a> {
    pub data: &'a [f32],
    pub trans: bool,
}

pub(crate) fn mat(data: &[f32]) -> Mat<'_> {
    Mat { data, trans: false }
}

pub(crate) fn mat_t(data: &[f32]) -> Mat<'_> {
    Mat { data, trans: true }
}

/// `c (m×n) = beta·c + a (m×k) · b (k×n)`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.data.len(), m * k);
    debug_assert_eq!(b.data.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a.trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b.trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the logical dimensions
    // and strides, so every index matrixmultiply touches is in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_im2col(x: &[f32], g: &Window) -> Vec<f32> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.patch_len() * oh * ow];
        for c in 0..g.c {
            for ki in 0..g.k {
                for kj in 0..g.k {
                    let r = (c * g.k + ki) * g.k + kj;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                                out[r * oh * ow + oy * ow + ox] = x[(c * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_matches_naive() {
        for &(h, w, k, stride, pad) in &[
            (8, 8, 3, 1, 1),
            (8, 6, 3, 2, 1),
            (9, 7, 7, 1, 3),
            (5, 5, 3, 2, 0),
            (4, 4, 3, 1, 0),
        ] {
            let g = Window {
                c: 2,
                h,
                w,
                k,
                stride,
                pad,
            };
            let x: Vec<f32> = (0..2 * h * w).map(|i| i as f32 * 0.5 - 3.0).collect();
            let mut cols = vec![f32::NAN; g.patch_len() * g.positions()];
            im2col(&x, &g, &mut cols);
            assert_eq!(cols, naive_im2col(&x, &g), "{h}x{w} k{k} s{stride} p{pad}");
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = Window {
            c: 3,
            h: 8,
            w: 8,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f32> = (0..3 * 64).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let y: Vec<f32> = (0..g.patch_len() * g.positions())
            .map(|i| ((i * 13) % 7) as f32 - 3.0)
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f32 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, mat(&a), mat(&b), 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, mat_t(&a), mat(&b), 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, mat(&a), mat_t(&b), 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
