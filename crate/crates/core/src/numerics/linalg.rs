//! Thin wrappers over a packed GEMM kernel for row-major slices.

/// Matrix operand view: a row-major `rows × cols` buffer, optionally read
/// transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a> Mat<'a> {
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    fn logical(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out = beta * out + a · b`, with `out` row-major `m × n`.
pub fn gemm(a: Mat<'_>, b: Mat<'_>, out: &mut [f64], beta: f64) {
    let (m, k) = a.logical();
    let (k2, n) = b.logical();
    assert_eq!(k, k2, "inner dimensions differ");
    assert_eq!(out.len(), m * n, "output buffer has wrong size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above pin every operand length to the logical
    // dimensions and strides handed to the kernel, so all accesses are in
    // bounds; `out` is uniquely borrowed and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
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
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: Mat<'_>, b: Mat<'_>) -> Vec<f64> {
    let m = a.logical().0;
    let n = b.logical().1;
    let mut out = vec![0.0; m * n];
    gemm(a, b, &mut out, 0.0);
    out
}

/// Adds `bias` to every row of the row-major `rows × bias.len()` buffer.
pub fn add_row_bias(out: &mut [f64], bias: &[f64]) {
    for row in out.chunks_exact_mut(bias.len()) {
        row.iter_mut().zip(bias).for_each(|(o, b)| *o += b);
    }
}

/// Accumulates column sums of a row-major `rows × acc.len()` buffer.
pub fn accumulate_col_sums(src: &[f64], acc: &mut [f64]) {
    for row in src.chunks_exact(acc.len()) {
        acc.iter_mut().zip(row).for_each(|(a, r)| *a += r);
    }
}
