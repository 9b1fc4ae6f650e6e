//! Data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! the same closures sequentially. Results are always collected in input
//! order, so reductions over them are bitwise reproducible regardless of
//! thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Whether the crate was built with the rayon backend.
pub const fn enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Maps `f` over `items`, preserving order.
pub fn map_collect<T, R, Fun>(items: &[T], f: Fun) -> Vec<R>
where
    T: Sync,
    R: Send,
    Fun: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Maps `f` over `0..n`, preserving order.
pub fn map_range<R, Fun>(n: usize, f: Fun) -> Vec<R>
where
    R: Send,
    Fun: Fn(usize) -> R + Sync + Send,
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

/// Calls `f(row_index, row)` for each `row_len`-sized chunk of `data`.
pub fn for_each_row<T, Fun>(data: &mut [T], row_len: usize, f: Fun)
where
    T: Send,
    Fun: Fn(usize, &mut [T]) + Sync + Send,
{
    if row_len == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
    }
}

/// Like [`for_each_row`] but always sequential; used for small workloads
/// where task spawning costs more than the work.
pub fn for_each_row_seq<T, Fun>(data: &mut [T], row_len: usize, f: Fun)
where
    Fun: Fn(usize, &mut [T]),
{
    if row_len == 0 {
        return;
    }
    data.chunks_mut(row_len).enumerate().for_each(|(i, row)| f(i, row));
}
