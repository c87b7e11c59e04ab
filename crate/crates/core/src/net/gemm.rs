//! Strided `f64` matrix multiply on slices.

/// Row/column strides of a matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub const fn rows(cols: usize) -> Self {
        View { rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub const fn transposed(cols: usize) -> Self {
        View { rs: 1, cs: cols }
    }

    fn max_offset(self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || av.max_offset(m, k) < a.len(), "gemm: a out of bounds");
    assert!(k == 0 || bv.max_offset(k, n) < b.len(), "gemm: b out of bounds");
    assert!(cv.max_offset(m, n) < c.len(), "gemm: c out of bounds");
    // SAFETY: the asserts above bound every element the kernel touches, and
    // `c` is exclusively borrowed so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
