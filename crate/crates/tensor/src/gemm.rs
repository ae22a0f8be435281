/// Panics unless a `rows×cols` matrix with the given strides fits in `len`.
pub(crate) fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize, what: &str) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * rs + (cols - 1) * cs;
    assert!(last < len, "gemm: {what} {rows}x{cols} (strides {rs},{cs}) exceeds {len} elements");
}

/// Row/column strides for a row-major GEMM call, after validating operand sizes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn strides(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    a_len: usize,
    b_len: usize,
    c_len: usize,
) -> (usize, usize, usize, usize) {
    assert_eq!(a_len, m * k, "gemm: lhs has {a_len} elements, expected {m}x{k}");
    assert_eq!(b_len, k * n, "gemm: rhs has {b_len} elements, expected {k}x{n}");
    assert_eq!(c_len, m * n, "gemm: out has {c_len} elements, expected {m}x{n}");
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    (rsa, csa, rsb, csb)
}
