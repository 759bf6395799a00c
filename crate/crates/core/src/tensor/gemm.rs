use super::Element;

/// Row-major `C (m x n) = op(A) * op(B)`, or `C += ...` when `accumulate`.
///
/// `A` is stored `m x k` (or `k x m` when `trans_a`), `B` is stored `k x n`
/// (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "A too short for {m}x{k}");
    assert!(b.len() >= k * n, "B too short for {k}x{n}");
    assert!(c.len() >= m * n, "C too short for {m}x{n}");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(T::zero());
        }
        return;
    }
    let a_strides = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    T::gemm_raw(m, k, n, a, a_strides, b, b_strides, c, accumulate);
}

/// Placement of a (possibly strided, padded) convolution window.
///
/// Output position `o` along an axis reads input `o * stride + tap - pad`;
/// reads outside the input are zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, o: usize, tap: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + tap) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Unfold one image `(channels, in_h, in_w)` into `(channels*kh*kw, out_h*out_w)`.
pub(crate) fn im2col<T: Element>(x: &[T], win: &Window, cols: &mut [T]) {
    let ohw = win.col_cols();
    debug_assert_eq!(cols.len(), win.col_rows() * ohw);
    for c in 0..win.channels {
        let plane = &x[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (c * win.kh + ky) * win.kw + kx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..win.out_h {
                    let line = &mut dst[oy * win.out_w..(oy + 1) * win.out_w];
                    let Some(iy) = win.source(oy, ky, win.pad_h, win.in_h) else {
                        line.fill(T::zero());
                        continue;
                    };
                    let src = &plane[iy * win.in_w..(iy + 1) * win.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        *v = match win.source(ox, kx, win.pad_w, win.in_w) {
                            Some(ix) => src[ix],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image.
pub(crate) fn col2im<T: Element>(cols: &[T], win: &Window, x: &mut [T]) {
    let ohw = win.col_cols();
    for c in 0..win.channels {
        let plane = &mut x[c * win.in_h * win.in_w..(c + 1) * win.in_h * win.in_w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (c * win.kh + ky) * win.kw + kx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..win.out_h {
                    let Some(iy) = win.source(oy, ky, win.pad_h, win.in_h) else {
                        continue;
                    };
                    let line = &src[oy * win.out_w..(oy + 1) * win.out_w];
                    let dst = &mut plane[iy * win.in_w..(iy + 1) * win.in_w];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(ix) = win.source(ox, kx, win.pad_w, win.in_w) {
                            dst[ix] = dst[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    let av = if ta { a[l * m + i] } else { a[i * k + l] };
                    let bv = if tb { b[j * k + l] } else { b[l * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive_for_all_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                matmul(m, k, n, &a, ta, &b, tb, &mut c, false);
                let want = naive(m, k, n, &a, ta, &b, tb);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
                matmul(m, k, n, &a, ta, &b, tb, &mut c, true);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - 2.0 * y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let win = Window {
            channels: 2,
            in_h: 5,
            in_w: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            pad_h: 1,
            pad_w: 1,
            out_h: 3,
            out_w: 3,
        };
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..win.col_rows() * win.col_cols())
            .map(|i| (i as f64 * 0.3).cos())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &win, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &win, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
