//! Row-major matrix products backed by `matrixmultiply`.

/// Shape and layout of one gemm operand: `rows x cols` view with the given
/// row and column strides into a flat slice.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl View {
    /// Dense row-major `rows x cols`.
    pub fn dense(rows: usize, cols: usize) -> Self {
        View {
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Row-major block with an explicit leading dimension.
    pub fn strided(rows: usize, cols: usize, ld: usize) -> Self {
        View {
            rows,
            cols,
            row_stride: ld as isize,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }
}

/// `c = alpha * a @ b + beta * c`, where `c` is `a.rows x b.cols` with leading
/// dimension `ldc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    assert_eq!(av.cols, bv.rows, "inner dimensions");
    let (m, k, n) = (av.rows, av.cols, bv.cols);
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(span(av) <= a.len() && span(bv) <= b.len());
    debug_assert!(m == 0 || (m - 1) * ldc + n <= c.len());
    // SAFETY: extents checked above in debug builds; callers construct views
    // from the same buffers they pass in.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            av.row_stride,
            av.col_stride,
            b.as_ptr(),
            bv.row_stride,
            bv.col_stride,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

fn span(v: View) -> usize {
    if v.rows == 0 || v.cols == 0 {
        0
    } else {
        (v.rows - 1) * v.row_stride as usize + (v.cols - 1) * v.col_stride as usize + 1
    }
}

/// `out[m x n] (+)= x[m x k] @ w[n x k]^T`, the forward pass of a linear layer
/// with weights stored `(out_features, in_features)`.
pub fn matmul_wt(x: &[f64], m: usize, k: usize, w: &[f64], n: usize, out: &mut [f64], accumulate: bool) {
    gemm(
        1.0,
        x,
        View::dense(m, k),
        w,
        View::dense(n, k).t(),
        if accumulate { 1.0 } else { 0.0 },
        out,
        n,
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_naive() {
        let x: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let w: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 2.0).collect(); // 4x3
        let mut out = vec![0.0; 8];
        matmul_wt(&x, 2, 3, &w, 4, &mut out, false);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| x[i * 3 + k] * w[j * 3 + k]).sum();
                assert_eq!(out[i * 4 + j], want);
            }
        }
    }
}
