//! Row-major dense kernels.
//!
//! Every kernel produces the same bits regardless of how many threads run it:
//! work is split by output rows and each row is reduced in a fixed order.

use std::sync::OnceLock;

use super::Real;

/// Work (in multiply-adds) below which a kernel stays on the calling thread.
const PARALLEL_THRESHOLD: usize = 1 << 20;

/// Kernel thread cap from `PAL_THREADS`, defaulting to the machine's
/// available parallelism.
pub fn kernel_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("PAL_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            })
    })
}

/// Runs `body(row_start, rows_chunk)` over `out` split into contiguous row
/// blocks of width `cols`.
fn for_row_blocks<F: Real>(
    out: &mut [F],
    rows: usize,
    cols: usize,
    work: usize,
    body: impl Fn(usize, &mut [F]) + Sync,
) {
    let threads = kernel_threads().min(rows.max(1));
    if threads <= 1 || work < PARALLEL_THRESHOLD || cols == 0 {
        body(0, out);
        return;
    }
    let per = rows.div_ceil(threads);
    std::thread::scope(|s| {
        for (i, chunk) in out.chunks_mut(per * cols).enumerate() {
            let body = &body;
            s.spawn(move || body(i * per, chunk));
        }
    });
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut tail = F::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline]
fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c += a · b` with a: m×k, b: k×n, c: m×n.
pub fn gemm<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for_row_blocks(c, m, n, m * k * n, |row0, block| {
        for (r, crow) in block.chunks_mut(n).enumerate() {
            let i = row0 + r;
            let arow = &a[i * k..(i + 1) * k];
            for (p, &aip) in arow.iter().enumerate() {
                if aip != F::zero() {
                    axpy(aip, &b[p * n..(p + 1) * n], crow);
                }
            }
        }
    });
}

/// `c += a · bᵀ` with a: m×k, b: n×k, c: m×n.
pub fn gemm_nt<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for_row_blocks(c, m, n, m * k * n, |row0, block| {
        for (r, crow) in block.chunks_mut(n).enumerate() {
            let i = row0 + r;
            let arow = &a[i * k..(i + 1) * k];
            for (j, cij) in crow.iter_mut().enumerate() {
                *cij += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
    });
}

/// `c += aᵀ · b` with a: m×k, b: m×n, c: k×n.
pub fn gemm_tn<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for_row_blocks(c, k, n, m * k * n, |row0, block| {
        let rows = block.len() / n.max(1);
        for i in 0..m {
            let brow = &b[i * n..(i + 1) * n];
            for r in 0..rows {
                let aip = a[i * k + row0 + r];
                if aip != F::zero() {
                    axpy(aip, brow, &mut block[r * n..(r + 1) * n]);
                }
            }
        }
    });
}
