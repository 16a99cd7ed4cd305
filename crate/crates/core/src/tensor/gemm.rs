//! Thin wrappers over `matrixmultiply::dgemm` for row-major buffers.

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Trans {
    N,
    T,
}

/// `c = beta * c + op(a) * op(b)` where `op(a)` is `m x k`, `op(b)` is `k x n`.
///
/// `a` is stored row-major as `m x k` when `ta == N` and as `k x m` otherwise;
/// likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: Trans,
    b: &[f64],
    tb: Trans,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c.fill(0.0);
        } else {
            c.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    let (rsa, csa) = match ta {
        Trans::N => (k as isize, 1),
        Trans::T => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::N => (n as isize, 1),
        Trans::T => (1, k as isize),
    };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements (asserted
    // above in debug builds, guaranteed by every caller), and the strides
    // describe those row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
