//! Thin safe wrapper around `matrixmultiply::dgemm`.

/// `c = a · b + beta · c` for an `m × k` matrix `a` and a `k × n` matrix `b`.
///
/// Strides are `(row, column)` element strides, so a transposed operand is
/// passed by swapping them. `c` is always dense row-major `m × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n, "gemm: output too small");
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too small");
    assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too small");
    if k == 0 {
        for x in &mut c[..m * n] {
            *x *= beta;
        }
        return;
    }
    // SAFETY: the asserts above guarantee every index matrixmultiply touches
    // lies inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
