/// Strided view of a row-major-ish matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Strides {
    pub rows: isize,
    pub cols: isize,
}

impl Strides {
    pub fn row_major(cols: usize) -> Self {
        Self { rows: cols as isize, cols: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { rows: 1, cols: cols as isize }
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        (rows.saturating_sub(1) as isize * self.rows + cols.saturating_sub(1) as isize * self.cols)
            as usize
    }
}

/// `c = alpha * a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`,
/// each addressed through its own strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(sa.max_offset(m, k) < a.len(), "gemm: a out of bounds");
        assert!(sb.max_offset(k, n) < b.len(), "gemm: b out of bounds");
    }
    assert!(sc.max_offset(m, n) < c.len(), "gemm: c out of bounds");
    assert!(sa.rows >= 0 && sa.cols >= 0 && sb.rows >= 0 && sb.cols >= 0);
    assert!(sc.rows > 0 && sc.cols > 0);
    // SAFETY: every index reachable through the given dimensions and strides
    // was bounds-checked above, and `c` is a distinct mutable borrow.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.rows,
            sa.cols,
            b.as_ptr(),
            sb.rows,
            sb.cols,
            beta,
            c.as_mut_ptr(),
            sc.rows,
            sc.cols,
        );
    }
}
