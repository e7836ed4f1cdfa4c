//! Order-preserving data-parallel helpers.
//!
//! With the `parallel` feature these dispatch to rayon; without it they run
//! the same closures sequentially. Every helper returns results in input
//! order, so both builds produce bit-identical outputs.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many items the sequential path is used even with `parallel`.
pub const MIN_PAR_LEN: usize = 64;

pub fn map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if items.len() >= MIN_PAR_LEN {
            return items.par_iter().map(f).collect();
        }
    }
    items.iter().map(f).collect()
}

pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if n >= MIN_PAR_LEN {
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Same as [`map_range`] but without the small-input cutoff; used for coarse
/// jobs such as whole seeds or whole tasks.
pub fn map_coarse<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        return (0..n).into_par_iter().map(f).collect();
    }
    #[allow(unreachable_code)]
    (0..n).map(f).collect()
}

/// Apply `f` to consecutive `chunk`-sized row blocks of `out`.
pub fn for_each_chunk_mut<T, F>(out: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        if out.len() / chunk >= 2 {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}
