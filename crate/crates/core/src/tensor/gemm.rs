use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

/// `c[m,n] = op(a) · op(b) + beta · c`, all buffers row-major.
///
/// `a` is stored `[m,k]`, or `[k,m]` when `a_t`; `b` is `[k,n]`, or `[n,k]`
/// when `b_t`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let av = if a_t {
        ArrayView2::from_shape((m, k).strides((1, m)), a)
    } else {
        ArrayView2::from_shape((m, k), a)
    }
    .expect("gemm lhs view");
    let bv = if b_t {
        ArrayView2::from_shape((k, n).strides((1, k)), b)
    } else {
        ArrayView2::from_shape((k, n), b)
    }
    .expect("gemm rhs view");
    let mut cv = ArrayViewMut2::from_shape((m, n), c).expect("gemm out view");
    general_mat_mul(1.0, &av, &bv, beta, &mut cv);
}
