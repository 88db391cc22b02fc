//! Row- and element-parallel helpers. With the `parallel` feature the work
//! runs on the rayon pool; without it, on the calling thread. Outputs are
//! identical either way: reductions happen in deterministic order.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Applies `f` to each `width`-sized row of `data` with its row index.
pub(crate) fn for_each_row<T, F>(data: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(width).enumerate().for_each(|(y, row)| f(y, row));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(width).enumerate().for_each(|(y, row)| f(y, row));
    }
}

/// Order-preserving map over a slice.
pub(crate) fn map_collect<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Sync,
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

/// Runs `f` for every index in `0..n`, in parallel when enabled. Used for
/// per-frame work where each index owns its outputs (e.g. one file each).
pub(crate) fn try_for_each_index<E, F>(n: usize, f: F) -> Result<(), E>
where
    E: Send,
    F: Fn(usize) -> Result<(), E> + Sync,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().try_for_each(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).try_for_each(f)
    }
}
