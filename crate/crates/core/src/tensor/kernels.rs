//! Matrix multiplication kernels.
//!
//! The top-level functions split output rows across the rayon pool when the
//! problem is large enough; [`seq`] holds the single-threaded versions that
//! both paths share, so results are identical either way.

use super::{Mat, Real};
use crate::par;

/// Below this many multiply-adds the sequential kernel is used.
pub const PARALLEL_THRESHOLD: usize = 1 << 16;

fn use_parallel(m: usize, k: usize, n: usize) -> bool {
    par::enabled() && m > 1 && m * k * n >= PARALLEL_THRESHOLD
}

/// `a[m,k] * b[k,n]`.
pub fn matmul<F: Real>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    assert_eq!(a.cols, b.rows, "matmul inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Mat::zeros(m, n);
    if use_parallel(m, k, n) {
        par::for_each_row(&mut out.data, n, |i, row| seq::ab_row(a, b, i, row));
    } else {
        par::for_each_row_seq(&mut out.data, n, |i, row| seq::ab_row(a, b, i, row));
    }
    out
}

/// `a[m,k] * b[n,k]^T`.
pub fn matmul_bt<F: Real>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    assert_eq!(a.cols, b.cols, "matmul_bt inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Mat::zeros(m, n);
    if use_parallel(m, k, n) {
        par::for_each_row(&mut out.data, n, |i, row| seq::abt_row(a, b, i, row));
    } else {
        par::for_each_row_seq(&mut out.data, n, |i, row| seq::abt_row(a, b, i, row));
    }
    out
}

/// `a[r,m]^T * b[r,n]`.
pub fn matmul_at<F: Real>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
    assert_eq!(a.rows, b.rows, "matmul_at inner dimension");
    let (m, k, n) = (a.cols, a.rows, b.cols);
    let mut out = Mat::zeros(m, n);
    if use_parallel(m, k, n) {
        par::for_each_row(&mut out.data, n, |i, row| seq::atb_row(a, b, i, row));
    } else {
        par::for_each_row_seq(&mut out.data, n, |i, row| seq::atb_row(a, b, i, row));
    }
    out
}

pub mod seq {
    use super::super::{Mat, Real};

    pub(super) fn ab_row<F: Real>(a: &Mat<F>, b: &Mat<F>, i: usize, out: &mut [F]) {
        let n = b.cols;
        for (p, &aip) in a.row(i).iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }

    pub(super) fn abt_row<F: Real>(a: &Mat<F>, b: &Mat<F>, i: usize, out: &mut [F]) {
        let arow = a.row(i);
        for (j, o) in out.iter_mut().enumerate() {
            let brow = b.row(j);
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            *o = acc;
        }
    }

    pub(super) fn atb_row<F: Real>(a: &Mat<F>, b: &Mat<F>, i: usize, out: &mut [F]) {
        let n = b.cols;
        for r in 0..a.rows {
            let ari = a.data[r * a.cols + i];
            let brow = &b.data[r * n..(r + 1) * n];
            for (o, &bv) in out.iter_mut().zip(brow) {
                *o += ari * bv;
            }
        }
    }

    /// Single-threaded `a * b`.
    pub fn matmul<F: Real>(a: &Mat<F>, b: &Mat<F>) -> Mat<F> {
        assert_eq!(a.cols, b.rows, "matmul inner dimension");
        let mut out = Mat::zeros(a.rows, b.cols);
        let n = b.cols;
        if n > 0 {
            for (i, row) in out.data.chunks_mut(n).enumerate() {
                ab_row(a, b, i, row);
            }
        }
        out
    }
}
