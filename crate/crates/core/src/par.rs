//! Thin switch between rayon and sequential iteration.
//!
//! Every parallel loop in the crate writes to disjoint outputs and performs
//! its reductions sequentially, so results do not depend on the thread count.

#[cfg(feature = "parallel")]
pub(crate) fn for_each_chunk<T: Send>(data: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    use rayon::prelude::*;
    data.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn for_each_chunk<T: Send>(data: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(feature = "parallel")]
pub(crate) fn map_collect<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> O + Sync + Send) -> Vec<O> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_collect<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> O + Sync + Send) -> Vec<O> {
    items.iter().map(f).collect()
}

/// Sizes the global worker pool; 0 picks one thread per core.
#[cfg(feature = "parallel")]
pub fn configure_workers(n: usize) -> crate::Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| crate::Error::Config(format!("cannot size worker pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
pub fn configure_workers(_n: usize) -> crate::Result<()> {
    Ok(())
}
