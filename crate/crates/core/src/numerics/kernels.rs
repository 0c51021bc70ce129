//! Matrix multiplication kernels.
//!
//! Three layouts cover forward passes and both backward contractions without
//! ever materializing a transpose:
//!
//! * `matmul`:    C[m,n] = A[m,k] * B[k,n]
//! * `matmul_nt`: C[m,n] = A[m,k] * B[n,k]^T
//! * `matmul_tn`: C[k,n] = A[m,k]^T * B[m,n]
//!
//! All kernels accumulate into `out` rather than overwrite it, which lets
//! backward rules add contributions in place; pass a zeroed buffer for a
//! plain product.
//!
//! Each has a sequential and, behind the `parallel` feature, a row-parallel
//! variant.  The parallel variants split only over output rows and keep the
//! reduction order per element identical to the sequential code, so the two
//! agree bit for bit.  Dispatch picks the parallel path when the product is
//! large enough to amortize the fork and more than one worker exists.

use super::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Multiply-accumulate count below which forking is never worth it.
const PAR_MIN_MACS: usize = 1 << 18;

#[inline]
fn axpy<S: Scalar>(acc: &mut [S], a: S, row: &[S]) {
    for (c, &b) in acc.iter_mut().zip(row) {
        *c = *c + a * b;
    }
}

/// Inner product with four independent accumulators so the loop vectorizes.
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let base = i * 4;
        for lane in 0..4 {
            acc[lane] = acc[lane] + a[base + lane] * b[base + lane];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 4..a.len() {
        tail = tail + a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn mm_row<S: Scalar>(out_row: &mut [S], a_row: &[S], b: &[S], n: usize) {
    for (l, &a) in a_row.iter().enumerate() {
        axpy(out_row, a, &b[l * n..(l + 1) * n]);
    }
}

pub fn matmul_seq<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for (out_row, a_row) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        mm_row(out_row, a_row, b, n);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    out.par_chunks_exact_mut(n)
        .zip(a.par_chunks_exact(k))
        .for_each(|(out_row, a_row)| mm_row(out_row, a_row, b, n));
}

#[inline]
fn nt_row<S: Scalar>(out_row: &mut [S], a_row: &[S], b: &[S], k: usize) {
    for (l, out_val) in out_row.iter_mut().enumerate() {
        *out_val = *out_val + dot(a_row, &b[l * k..(l + 1) * k]);
    }
}

pub fn matmul_nt_seq<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for (out_row, a_row) in out.chunks_exact_mut(n).zip(a.chunks_exact(k)) {
        nt_row(out_row, a_row, b, k);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    out.par_chunks_exact_mut(n)
        .zip(a.par_chunks_exact(k))
        .for_each(|(out_row, a_row)| nt_row(out_row, a_row, b, k));
}

pub fn matmul_tn_seq<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for l in 0..k {
            axpy(&mut out[l * n..(l + 1) * n], a[i * k + l], b_row);
        }
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    out.par_chunks_exact_mut(n).enumerate().for_each(|(l, out_row)| {
        for i in 0..m {
            axpy(out_row, a[i * k + l], &b[i * n..(i + 1) * n]);
        }
    });
}

#[cfg(feature = "parallel")]
#[inline]
fn go_parallel(m: usize, k: usize, n: usize) -> bool {
    m > 1 && m * k * n >= PAR_MIN_MACS && rayon::current_num_threads() > 1
}

pub fn matmul<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if go_parallel(m, k, n) {
        return matmul_par(out, a, b, m, k, n);
    }
    matmul_seq(out, a, b, m, k, n);
}

pub fn matmul_nt<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if go_parallel(m, k, n) {
        return matmul_nt_par(out, a, b, m, k, n);
    }
    matmul_nt_seq(out, a, b, m, k, n);
}

pub fn matmul_tn<S: Scalar>(out: &mut [S], a: &[S], b: &[S], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if go_parallel(k, m, n) {
        return matmul_tn_par(out, a, b, m, k, n);
    }
    matmul_tn_seq(out, a, b, m, k, n);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    out[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    fn arb(len: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matches_naive_matmul() {
        for &(m, k, n) in &[(1, 1, 1), (2, 3, 4), (5, 7, 3), (8, 8, 8)] {
            let a = arb(m * k, 1);
            let b = arb(k * n, 2);
            let mut out = vec![0.0; m * n];
            matmul_seq(&mut out, &a, &b, m, k, n);
            let want = naive(&a, &b, m, k, n);
            for (x, y) in out.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nt_matches_explicit_transpose() {
        let (m, k, n) = (4, 6, 5);
        let a = arb(m * k, 3);
        let bt = arb(n * k, 4);
        let mut b = vec![0.0; k * n];
        for j in 0..n {
            for l in 0..k {
                b[l * n + j] = bt[j * k + l];
            }
        }
        let mut got = vec![0.0; m * n];
        matmul_nt_seq(&mut got, &a, &bt, m, k, n);
        let want = naive(&a, &b, m, k, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn tn_matches_explicit_transpose() {
        let (m, k, n) = (6, 4, 5);
        let a = arb(m * k, 5);
        let b = arb(m * n, 6);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut got = vec![0.0; k * n];
        matmul_tn_seq(&mut got, &a, &b, m, k, n);
        let want = naive(&at, &b, k, m, n);
        for (x, y) in got.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_is_bit_identical() {
        let (m, k, n) = (33, 47, 29);
        let a = arb(m * k, 7);
        let b = arb(k * n, 8);
        let mut seq = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        matmul_seq(&mut seq, &a, &b, m, k, n);
        matmul_par(&mut par, &a, &b, m, k, n);
        assert_eq!(seq, par);

        let bt = arb(n * k, 9);
        let mut seq_nt = vec![0.0; m * n];
        let mut par_nt = vec![0.0; m * n];
        matmul_nt_seq(&mut seq_nt, &a, &bt, m, k, n);
        matmul_nt_par(&mut par_nt, &a, &bt, m, k, n);
        assert_eq!(seq_nt, par_nt);

        let bb = arb(m * n, 10);
        let mut seq_tn = vec![0.0; k * n];
        let mut par_tn = vec![0.0; k * n];
        matmul_tn_seq(&mut seq_tn, &a, &bb, m, k, n);
        matmul_tn_par(&mut par_tn, &a, &bb, m, k, n);
        assert_eq!(seq_tn, par_tn);
    }
}
