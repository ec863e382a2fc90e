//! Data-parallel helpers shared by the operators, the noise synthesizer and
//! the evaluation loop.
//!
//! With the `parallel` feature the helpers dispatch to rayon, otherwise they
//! run the same chunks in order. Chunk boundaries never depend on the worker
//! count, which keeps every result bit-identical across thread counts.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::tensor::Scalar;

/// Rows of the output matrix handled by one gemm task.
pub const GEMM_ROW_CHUNK: usize = 64;

/// Runs `f(chunk_index, chunk)` over consecutive `chunk`-sized pieces of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(chunk > 0);
    #[cfg(feature = "parallel")]
    data.par_chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c));
    #[cfg(not(feature = "parallel"))]
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

/// Evaluates `f(0..n)` and collects the results in index order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major view with contiguous rows.
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert!(data.len() >= rows * cols);
        MatRef { data, rows, cols, rs: cols, cs: 1 }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `out = a b + beta * out`, where `out` is a contiguous row-major
/// `a.rows x b.cols` buffer. Row blocks of `out` run as independent tasks.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(out.len(), m * n, "gemm output size mismatch");
    assert!(a.max_offset() < a.data.len().max(1));
    assert!(b.max_offset() < b.data.len().max(1));
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.iter_mut().for_each(|v| *v = beta * *v);
        return;
    }
    for_each_chunk_mut(out, GEMM_ROW_CHUNK * n, |ci, c| {
        let r0 = ci * GEMM_ROW_CHUNK;
        let rows = c.len() / n;
        // SAFETY: the row block [r0, r0 + rows) of `a` is in bounds (checked
        // via max_offset above) and `c` is exclusively owned by this task.
        unsafe {
            T::gemm(
                rows,
                k,
                n,
                T::one(),
                a.data.as_ptr().add(r0 * a.rs),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_across_chunk_boundaries() {
        let (m, k, n) = (150, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13) % 7) as f64 * 0.5).collect();
        let mut c = vec![0.0; m * n];
        gemm(
            MatRef::row_major(&a, m, k),
            MatRef::row_major(&b, k, n),
            0.0,
            &mut c,
        );
        assert_eq!(c, naive(&a, &b, m, k, n));
    }

    #[test]
    fn transposed_views() {
        // a is stored as k x m; use its transpose.
        let (m, k, n) = (3, 4, 2);
        let at: Vec<f64> = (0..k * m).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 1.0 + i as f64).collect();
        let mut a = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                a[i * k + p] = at[p * m + i];
            }
        }
        let mut c = vec![1.0; m * n];
        gemm(
            MatRef::row_major(&at, k, m).t(),
            MatRef::row_major(&b, k, n),
            1.0,
            &mut c,
        );
        let expect: Vec<f64> = naive(&a, &b, m, k, n).iter().map(|v| v + 1.0).collect();
        assert_eq!(c, expect);
    }

    #[test]
    fn map_indices_keeps_order() {
        assert_eq!(map_indices(5, |i| i * i), vec![0, 1, 4, 9, 16]);
    }
}
