//! Dense row-major `f32` matrices and the handful of products the training
//! loop needs.
//!
//! `Matrix2D` is the only tensor type in the crate; a batch of examples is a
//! matrix with one example per row. Shape mismatches are programmer errors
//! and panic.

/// Row-major dense single-precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix2D {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix2D {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix2D {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Builds a matrix from a flat row-major buffer.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Matrix2D::from_vec: buffer length {} does not match {}x{}",
            data.len(),
            rows,
            cols
        );
        Matrix2D { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "Matrix2D::from_rows: ragged rows");
            data.extend_from_slice(r);
        }
        Matrix2D {
            rows: rows.len(),
            cols,
            data,
        }
    }

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix2D::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix2D {
        let mut out = Matrix2D::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `a * b`. Panics on inner-dimension mismatch.
///
/// Accumulation runs row by row in ascending-`k` order, which makes the
/// result bit-identical to the naive triple loop while still vectorizing:
/// the inner loop is a saxpy over a full output row. Zero coefficients are
/// skipped; with finite inputs adding `0.0 * x` is an exact no-op, and both
/// MNIST pixels and sparse hidden activations are mostly zeros.
pub fn matmul(a: &Matrix2D, b: &Matrix2D) -> Matrix2D {
    assert_eq!(
        a.cols, b.rows,
        "matmul: {}x{} * {}x{} dimension mismatch",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut c = Matrix2D::zeros(a.rows, b.cols);
    let n = b.cols;
    for (a_row, c_row) in a.data.chunks_exact(a.cols).zip(c.data.chunks_exact_mut(n)) {
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (cj, &bkj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bkj;
            }
        }
    }
    c
}

/// `a^T * b` without materializing the transpose.
///
/// Used for weight gradients (`dW = X^T * dZ`). Same accumulation order and
/// zero-skip as [`matmul`].
pub fn matmul_at_b(a: &Matrix2D, b: &Matrix2D) -> Matrix2D {
    assert_eq!(
        a.rows, b.rows,
        "matmul_at_b: {}x{} ^T * {}x{} dimension mismatch",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut c = Matrix2D::zeros(a.cols, b.cols);
    let n = b.cols;
    for i in 0..a.cols {
        let c_row = &mut c.data[i * n..(i + 1) * n];
        for k in 0..a.rows {
            let coef = a.data[k * a.cols + i];
            if coef == 0.0 {
                continue;
            }
            let b_row = &b.data[k * n..(k + 1) * n];
            for (cj, &bkj) in c_row.iter_mut().zip(b_row) {
                *cj += coef * bkj;
            }
        }
    }
    c
}

/// `a * b^T`; the reduction runs over contiguous rows of both operands.
pub fn matmul_a_bt(a: &Matrix2D, b: &Matrix2D) -> Matrix2D {
    assert_eq!(
        a.cols, b.cols,
        "matmul_a_bt: {}x{} * {}x{}^T dimension mismatch",
        a.rows, a.cols, b.rows, b.cols
    );
    let mut c = Matrix2D::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (j, cj) in c_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = 0.0f32;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *cj = acc;
        }
    }
    c
}

/// Divisor offset used for the standard deviation: 0 selects the population
/// form (divide by `n`), 1 the sample form (divide by `n - 1`).
pub const STD_DDOF: usize = 0;

/// Mean and standard deviation of one row, with an explicit divisor offset.
///
/// Accumulates in `f64`; a length-one row (or `ddof >= n`) has deviation 0.
pub fn mean_std_ddof(xs: &[f32], ddof: usize) -> (f32, f32) {
    assert!(!xs.is_empty(), "mean_std_ddof: empty slice");
    let n = xs.len();
    let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let std = if n > ddof {
        let ss = xs
            .iter()
            .map(|&v| {
                let d = v as f64 - mean;
                d * d
            })
            .sum::<f64>();
        (ss / (n - ddof) as f64).sqrt()
    } else {
        0.0
    };
    (mean as f32, std as f32)
}

/// Per-row mean and population standard deviation (divisor `n`).
pub fn row_mean_std(xs: &[f32]) -> (f32, f32) {
    mean_std_ddof(xs, STD_DDOF)
}
