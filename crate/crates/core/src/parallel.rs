//! Data-parallel loop helpers.
//!
//! With the `parallel` feature (default) the heavy kernels fan out over
//! rayon; without it the same closures run sequentially. Every parallel
//! loop in this crate writes disjoint output regions and performs its
//! reductions in a fixed order inside each region, so results are
//! bit-identical between the two modes and across thread counts.

/// Below this many output elements the rayon dispatch overhead is not
/// worth paying; the loop runs inline.
pub const MIN_PAR_LEN: usize = 4096;

#[cfg(feature = "parallel")]
pub fn for_each_chunk<T: Send, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    debug_assert!(chunk > 0);
    if out.len() < MIN_PAR_LEN || out.len() <= chunk {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    } else {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk<T, F>(out: &mut [T], chunk: usize, f: F)
where
    F: Fn(usize, &mut [T]) + Sync,
{
    debug_assert!(chunk > 0);
    for (i, c) in out.chunks_mut(chunk).enumerate() {
        f(i, c);
    }
}

/// Element-wise variant: `f(i, &mut out[i])`, possibly in parallel.
pub fn for_each_elem<T: Send, F>(out: &mut [T], f: F)
where
    F: Fn(usize, &mut T) + Sync,
{
    for_each_chunk(out, 1, |i, c| f(i, &mut c[0]));
}

/// True when the crate was built with rayon support.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}

/// Run `f` with all data-parallel loops pinned to a single worker
/// (stable timing for benchmarks). Without the `parallel` feature the
/// loops are already sequential.
#[cfg(feature = "parallel")]
pub fn run_single_threaded<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool")
        .install(f)
}

#[cfg(not(feature = "parallel"))]
pub fn run_single_threaded<R>(f: impl FnOnce() -> R) -> R {
    f()
}
