//! Strided matrix views over flat buffers, backed by `matrixmultiply`.

#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    data: &'a [f64],
    off: usize,
    rs: usize,
    cs: usize,
}

impl<'a> View<'a> {
    /// Row-major `rows x cols` matrix starting at `off` with row stride `ld`.
    pub(crate) fn rm(data: &'a [f64], off: usize, ld: usize) -> Self {
        Self { data, off, rs: ld, cs: 1 }
    }

    /// Transpose of the row-major matrix at `off` with row stride `ld`.
    pub(crate) fn tr(data: &'a [f64], off: usize, ld: usize) -> Self {
        Self { data, off, rs: 1, cs: ld }
    }

    fn check(&self, rows: usize, cols: usize) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.off + (rows - 1) * self.rs + (cols - 1) * self.cs;
        assert!(last < self.data.len(), "matrix view out of bounds");
    }
}

pub(crate) struct ViewMut<'a> {
    data: &'a mut [f64],
    off: usize,
    rs: usize,
    cs: usize,
}

impl<'a> ViewMut<'a> {
    pub(crate) fn rm(data: &'a mut [f64], off: usize, ld: usize) -> Self {
        Self { data, off, rs: ld, cs: 1 }
    }
}

/// `c = alpha * a * b + beta * c` where `a` is `m x k` and `b` is `k x n`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: View, b: View, beta: f64, c: ViewMut) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    let last = c.off + (m - 1) * c.rs + (n - 1) * c.cs;
    assert!(last < c.data.len(), "output view out of bounds");
    // SAFETY: every accessed element of a, b and c lies inside its slice
    // (checked above), and c does not alias a or b since it is borrowed
    // mutably.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.off),
            c.rs as isize,
            c.cs as isize,
        );
    }
}
