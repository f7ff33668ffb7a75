//! Low-level numeric kernels.
//!
//! Every kernel writes each output element exactly once with a fixed
//! per-element summation order, so the parallel and sequential paths produce
//! bitwise-identical results. Parallelism splits work over disjoint output
//! rows only.
//!
//! The number of worker threads comes from the `EDFORMER_THREADS` environment
//! variable (default 1, i.e. fully sequential), read once per process.

use std::sync::OnceLock;

static THREADS: OnceLock<usize> = OnceLock::new();

/// Worker thread cap, from `EDFORMER_THREADS` (default 1).
pub fn max_threads() -> usize {
    *THREADS.get_or_init(|| {
        std::env::var("EDFORMER_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

#[cfg(feature = "parallel")]
fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(max_threads())
            .build()
            .expect("failed to build thread pool")
    })
}

/// `out[b] = a[b] * bmat[b]` for `nb` independent row-major matrix products
/// `[p, q] x [q, r]`. A batch stride of 0 broadcasts one operand across the
/// batch.
#[allow(clippy::too_many_arguments)]
pub fn matmul_seq(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    nb: usize,
    p: usize,
    q: usize,
    r: usize,
    a_stride: usize,
    b_stride: usize,
) {
    debug_assert_eq!(out.len(), nb * p * r);
    for (row_idx, out_row) in out.chunks_mut(r).enumerate() {
        let batch = row_idx / p;
        let i = row_idx % p;
        let a_row = &a[batch * a_stride + i * q..batch * a_stride + (i + 1) * q];
        let b_mat = &b[batch * b_stride..batch * b_stride + q * r];
        out_row.fill(0.0);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = &b_mat[k * r..(k + 1) * r];
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
}

/// Parallel variant of [`matmul_seq`]; identical output, rows split across
/// the pool.
#[cfg(feature = "parallel")]
#[allow(clippy::too_many_arguments)]
pub fn matmul_par(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    nb: usize,
    p: usize,
    q: usize,
    r: usize,
    a_stride: usize,
    b_stride: usize,
) {
    use rayon::prelude::*;
    debug_assert_eq!(out.len(), nb * p * r);
    pool().install(|| {
        out.par_chunks_mut(r).enumerate().for_each(|(row_idx, out_row)| {
            let batch = row_idx / p;
            let i = row_idx % p;
            let a_row = &a[batch * a_stride + i * q..batch * a_stride + (i + 1) * q];
            let b_mat = &b[batch * b_stride..batch * b_stride + q * r];
            out_row.fill(0.0);
            for (k, &aik) in a_row.iter().enumerate() {
                let b_row = &b_mat[k * r..(k + 1) * r];
                for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bkj;
                }
            }
        });
    });
}

/// Dispatching matmul: parallel when compiled with the `parallel` feature and
/// more than one thread is allowed, sequential otherwise.
#[allow(clippy::too_many_arguments)]
pub fn matmul(
    a: &[f64],
    b: &[f64],
    out: &mut [f64],
    nb: usize,
    p: usize,
    q: usize,
    r: usize,
    a_stride: usize,
    b_stride: usize,
) {
    #[cfg(feature = "parallel")]
    if max_threads() > 1 && nb * p > 1 {
        matmul_par(a, b, out, nb, p, q, r, a_stride, b_stride);
        return;
    }
    matmul_seq(a, b, out, nb, p, q, r, a_stride, b_stride);
}

/// Centered moving average of width `kernel` (odd) along the time axis of a
/// `[batch, len, vars]` buffer, with edge replication padding.
///
/// The window mean is anchored at the window's center value
/// (`c + sum(x - c)/k`), which keeps constant windows exact: a window of k
/// equal values averages to exactly that value.
pub fn moving_avg_seq(
    x: &[f64],
    out: &mut [f64],
    batch: usize,
    len: usize,
    vars: usize,
    kernel: usize,
) {
    debug_assert!(kernel % 2 == 1);
    let half = (kernel / 2) as isize;
    let inv_k = 1.0 / kernel as f64;
    for b in 0..batch {
        let base = b * len * vars;
        for t in 0..len as isize {
            for n in 0..vars {
                let center = x[base + t as usize * vars + n];
                let mut acc = 0.0;
                for j in (t - half)..=(t + half) {
                    let tc = j.clamp(0, len as isize - 1) as usize;
                    acc += x[base + tc * vars + n] - center;
                }
                out[base + t as usize * vars + n] = center + acc * inv_k;
            }
        }
    }
}

/// Transpose of the moving-average operator: scatter `g` back through the
/// clamped windows with weight `1/kernel`.
pub fn moving_avg_transpose_seq(
    g: &[f64],
    out: &mut [f64],
    batch: usize,
    len: usize,
    vars: usize,
    kernel: usize,
) {
    let half = (kernel / 2) as isize;
    let inv_k = 1.0 / kernel as f64;
    for b in 0..batch {
        let base = b * len * vars;
        for t in 0..len as isize {
            for n in 0..vars {
                let gv = g[base + t as usize * vars + n] * inv_k;
                for j in (t - half)..=(t + half) {
                    let tc = j.clamp(0, len as isize - 1) as usize;
                    out[base + tc * vars + n] += gv;
                }
            }
        }
    }
}
