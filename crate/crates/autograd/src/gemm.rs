//! Thin strided wrapper around `matrixmultiply::dgemm`.

/// Row/column strides of one matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    /// Row-major `rows × cols` matrix.
    pub fn row_major(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = alpha * a·b + beta * c` with `a: m×k`, `b: k×n`, `c: m×n` (row-major).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // Bounds of the strided operands are checked here so the unsafe call
    // below only ever touches memory inside the slices.
    let extent = |rows: usize, cols: usize, l: Layout| {
        (rows - 1) as isize * l.rs + (cols - 1) as isize * l.cs
    };
    assert!(extent(m, k, la) < a.len() as isize, "gemm: lhs too small");
    assert!(extent(k, n, lb) < b.len() as isize, "gemm: rhs too small");
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
