//! Softmax, layer normalization, and pixel-wise cross-entropy kernels.

use crate::element::Element;
use crate::parallel::for_each_chunk;

/// Softmax along one axis described by (outer, n, inner) strides:
/// element (o, j, i) lives at o*n*inner + j*inner + i.
pub fn softmax_fwd<E: Element>(x: &[E], out: &mut [E], outer: usize, n: usize, inner: usize) {
    let _ = outer;
    for_each_chunk(out, n * inner, |o, chunk| {
        let xs = &x[o * n * inner..][..n * inner];
        for i in 0..inner {
            let mut mx = xs[i];
            for j in 1..n {
                mx = mx.maximum(xs[j * inner + i]);
            }
            let mut sum = E::ZERO;
            for j in 0..n {
                let e = (xs[j * inner + i] - mx).exp();
                chunk[j * inner + i] = e;
                sum += e;
            }
            let inv = E::ONE / sum;
            for j in 0..n {
                chunk[j * inner + i] *= inv;
            }
        }
    });
}

/// dx += y * (g - sum_j(g*y)) per slice, with y the saved softmax output.
pub fn softmax_bwd<E: Element>(
    gout: &[E],
    y: &[E],
    dx: &mut [E],
    outer: usize,
    n: usize,
    inner: usize,
) {
    let _ = outer;
    for_each_chunk(dx, n * inner, |o, chunk| {
        let gs = &gout[o * n * inner..][..n * inner];
        let ys = &y[o * n * inner..][..n * inner];
        for i in 0..inner {
            let mut dot = E::ZERO;
            for j in 0..n {
                dot += gs[j * inner + i] * ys[j * inner + i];
            }
            for j in 0..n {
                let idx = j * inner + i;
                chunk[idx] += ys[idx] * (gs[idx] - dot);
            }
        }
    });
}

/// Row-wise layer norm over the last axis: x is [rows, n].
/// Writes normalized output and saves per-row (mean, rstd).
pub fn layer_norm_fwd<E: Element>(
    x: &[E],
    gamma: &[E],
    beta: &[E],
    out: &mut [E],
    stats: &mut [E],
    rows: usize,
    n: usize,
    eps: E,
) {
    let _ = rows;
    let inv_n = E::ONE / E::from_f64(n as f64);
    // stats is [rows, 2]; each row task writes only its own pair.
    let stats_ptr = SharedMut(stats.as_mut_ptr());
    for_each_chunk(out, n, |r, o| {
        let xs = &x[r * n..][..n];
        let mut mean = E::ZERO;
        for &v in xs {
            mean += v;
        }
        mean *= inv_n;
        let mut var = E::ZERO;
        for &v in xs {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let rstd = E::ONE / (var + eps).sqrt();
        // Each row writes its own disjoint pair.
        unsafe {
            stats_ptr.write(r * 2, mean);
            stats_ptr.write(r * 2 + 1, rstd);
        }
        for j in 0..n {
            o[j] = (xs[j] - mean) * rstd * gamma[j] + beta[j];
        }
    });
}

// Raw pointer wrapper so disjoint per-row stat writes can cross the
// parallel closure boundary.
struct SharedMut<E>(*mut E);
unsafe impl<E> Send for SharedMut<E> {}
unsafe impl<E> Sync for SharedMut<E> {}

impl<E> SharedMut<E> {
    /// Caller must guarantee the index is written by exactly one task.
    unsafe fn write(&self, idx: usize, val: E) {
        *self.0.add(idx) = val;
    }
}

/// Layer-norm backward. dgamma/dbeta are reduced sequentially over rows;
/// dx is computed row-parallel.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_bwd<E: Element>(
    gout: &[E],
    x: &[E],
    gamma: &[E],
    stats: &[E],
    dx: &mut [E],
    dgamma: &mut [E],
    dbeta: &mut [E],
    rows: usize,
    n: usize,
) {
    let inv_n = E::ONE / E::from_f64(n as f64);
    for r in 0..rows {
        let mean = stats[r * 2];
        let rstd = stats[r * 2 + 1];
        let xs = &x[r * n..][..n];
        let gs = &gout[r * n..][..n];
        for j in 0..n {
            let xhat = (xs[j] - mean) * rstd;
            dgamma[j] += gs[j] * xhat;
            dbeta[j] += gs[j];
        }
    }
    for_each_chunk(dx, n, |r, dxr| {
        let mean = stats[r * 2];
        let rstd = stats[r * 2 + 1];
        let xs = &x[r * n..][..n];
        let gs = &gout[r * n..][..n];
        let mut m1 = E::ZERO;
        let mut m2 = E::ZERO;
        for j in 0..n {
            let gg = gs[j] * gamma[j];
            let xhat = (xs[j] - mean) * rstd;
            m1 += gg;
            m2 += gg * xhat;
        }
        m1 *= inv_n;
        m2 *= inv_n;
        for j in 0..n {
            let gg = gs[j] * gamma[j];
            let xhat = (xs[j] - mean) * rstd;
            dxr[j] += rstd * (gg - m1 - xhat * m2);
        }
    });
}

/// Mean pixel-wise cross-entropy over [B, K, H, W] logits with u8 labels.
/// Returns the scalar loss and writes per-pixel class probabilities
/// (needed by the backward pass) into `probs`.
pub fn cross_entropy_fwd<E: Element>(
    logits: &[E],
    target: &[u8],
    probs: &mut [E],
    batch: usize,
    classes: usize,
    pixels: usize,
) -> E {
    let mut loss = E::ZERO;
    for b in 0..batch {
        let l = &logits[b * classes * pixels..][..classes * pixels];
        let p = &mut probs[b * classes * pixels..][..classes * pixels];
        let t = &target[b * pixels..][..pixels];
        for i in 0..pixels {
            let mut mx = l[i];
            for k in 1..classes {
                mx = mx.maximum(l[k * pixels + i]);
            }
            let mut sum = E::ZERO;
            for k in 0..classes {
                let e = (l[k * pixels + i] - mx).exp();
                p[k * pixels + i] = e;
                sum += e;
            }
            let inv = E::ONE / sum;
            for k in 0..classes {
                p[k * pixels + i] *= inv;
            }
            // -log p[target]
            let pt = p[t[i] as usize * pixels + i];
            loss += -(pt.ln());
        }
    }
    loss / E::from_f64((batch * pixels) as f64)
}

/// dlogits += g * (probs - onehot) / N
pub fn cross_entropy_bwd<E: Element>(
    g: E,
    probs: &[E],
    target: &[u8],
    dlogits: &mut [E],
    batch: usize,
    classes: usize,
    pixels: usize,
) {
    let scale = g / E::from_f64((batch * pixels) as f64);
    for_each_chunk(dlogits, classes * pixels, |b, d| {
        let p = &probs[b * classes * pixels..][..classes * pixels];
        let t = &target[b * pixels..][..pixels];
        for k in 0..classes {
            for i in 0..pixels {
                let onehot = if t[i] as usize == k { E::ONE } else { E::ZERO };
                d[k * pixels + i] += scale * (p[k * pixels + i] - onehot);
            }
        }
    });
    let _ = batch;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0];
        let mut y = vec![0.0; 6];
        softmax_fwd(&x, &mut y, 2, 3, 1);
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_is_stable_at_large_inputs() {
        let x = vec![1000.0f32, 1000.0];
        let mut y = vec![0.0; 2];
        softmax_fwd(&x, &mut y, 1, 2, 1);
        assert!((y[0] - 0.5).abs() < 1e-6 && (y[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_ln2() {
        let logits = vec![0.0f64; 2 * 2 * 4];
        let target = vec![1u8, 0, 1, 0, 0, 1, 0, 1];
        let mut probs = vec![0.0; logits.len()];
        let loss = cross_entropy_fwd(&logits, &target, &mut probs, 2, 2, 4);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
    }
}
