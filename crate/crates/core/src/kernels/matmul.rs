//! Dense matrix-multiply kernels.
//!
//! All kernels accumulate into their output (`out +=`), which is what the
//! backward pass needs; forward callers pass zeroed buffers. Loops are
//! arranged so the innermost axis walks contiguous memory in both operands
//! (ikj order with row axpy), which the compiler vectorizes.

use crate::element::Element;
use crate::parallel::for_each_chunk;

/// out[m,n] += alpha * a[m,k] @ b[k,n]
pub fn matmul_acc<E: Element>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for_each_chunk(out, n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let coeff = alpha * a_ip;
            if coeff == E::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += coeff * bv;
            }
        }
    });
}

/// out[m,k] += alpha * g[m,n] @ b[k,n]^T    (rows of g dotted with rows of b)
pub fn matmul_abt_acc<E: Element>(
    g: &[E],
    b: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
) {
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for_each_chunk(out, k, |i, row| {
        let g_row = &g[i * n..(i + 1) * n];
        for (p, o) in row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = E::ZERO;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += *gv * *bv;
            }
            *o += alpha * acc;
        }
    });
}

/// out[k,n] += alpha * a[m,k]^T @ g[m,n]
pub fn matmul_atb_acc<E: Element>(
    a: &[E],
    g: &[E],
    out: &mut [E],
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for_each_chunk(out, n, |p, row| {
        for i in 0..m {
            let coeff = alpha * a[i * k + p];
            if coeff == E::ZERO {
                continue;
            }
            let g_row = &g[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(g_row) {
                *o += coeff * gv;
            }
        }
    });
}

/// Batched variant: out[t] += alpha * a[t] @ b[t] for t in 0..batch.
pub fn bmm_acc<E: Element>(
    a: &[E],
    b: &[E],
    out: &mut [E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
) {
    debug_assert_eq!(a.len(), batch * m * k);
    debug_assert_eq!(b.len(), batch * k * n);
    debug_assert_eq!(out.len(), batch * m * n);
    // Parallel over output rows across the whole batch.
    for_each_chunk(out, n, |row_idx, row| {
        let t = row_idx / m;
        let i = row_idx % m;
        let a_row = &a[(t * m + i) * k..(t * m + i + 1) * k];
        let b_mat = &b[t * k * n..(t + 1) * k * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let coeff = alpha * a_ip;
            if coeff == E::ZERO {
                continue;
            }
            let b_row = &b_mat[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(b_row) {
                *o += coeff * bv;
            }
        }
    });
}

/// Batched g @ b^T.
pub fn bmm_abt_acc<E: Element>(
    g: &[E],
    b: &[E],
    out: &mut [E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
) {
    debug_assert_eq!(g.len(), batch * m * n);
    for_each_chunk(out, k, |row_idx, row| {
        let t = row_idx / m;
        let i = row_idx % m;
        let g_row = &g[(t * m + i) * n..(t * m + i + 1) * n];
        let b_mat = &b[t * k * n..(t + 1) * k * n];
        for (p, o) in row.iter_mut().enumerate() {
            let b_row = &b_mat[p * n..(p + 1) * n];
            let mut acc = E::ZERO;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += *gv * *bv;
            }
            *o += alpha * acc;
        }
    });
}

/// Batched a^T @ g.
pub fn bmm_atb_acc<E: Element>(
    a: &[E],
    g: &[E],
    out: &mut [E],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    alpha: E,
) {
    debug_assert_eq!(a.len(), batch * m * k);
    for_each_chunk(out, n, |row_idx, row| {
        let t = row_idx / k;
        let p = row_idx % k;
        let a_mat = &a[t * m * k..(t + 1) * m * k];
        let g_mat = &g[t * m * n..(t + 1) * m * n];
        for i in 0..m {
            let coeff = alpha * a_mat[i * k + p];
            if coeff == E::ZERO {
                continue;
            }
            let g_row = &g_mat[i * n..(i + 1) * n];
            for (o, &gv) in row.iter_mut().zip(g_row) {
                *o += coeff * gv;
            }
        }
    });
}
