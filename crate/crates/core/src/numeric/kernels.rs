//! Dense loops shared by forward and backward passes.

use super::tensor::Real;

/// `out += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
/// `ta`/`tb` mean the operand is stored transposed (`k×m`, `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm_acc<F: Real>(
    a: &[F],
    b: &[F],
    out: &mut [F],
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let out_row = &mut out[i * n..(i + 1) * n];
                let a_row = &a[i * k..(i + 1) * k];
                for (p, &av) in a_row.iter().enumerate() {
                    if av == F::zero() {
                        continue;
                    }
                    let b_row = &b[p * n..(p + 1) * n];
                    axpy(av, b_row, out_row);
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let a_row = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    out[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let b_row = &b[p * n..(p + 1) * n];
                let a_row = &a[p * m..(p + 1) * m];
                for (i, &av) in a_row.iter().enumerate() {
                    if av == F::zero() {
                        continue;
                    }
                    axpy(av, b_row, &mut out[i * n..(i + 1) * n]);
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = F::zero();
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    out[i * n + j] += acc;
                }
            }
        }
    }
}

#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators let the loop vectorize without reassociation flags
    let mut acc = [F::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = F::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
