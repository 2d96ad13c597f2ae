//! Data-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature enabled, [`Exec::Parallel`] dispatches work to
//! the rayon global pool. Without it, every call runs sequentially regardless
//! of the requested mode.
//!
//! Reductions never depend on scheduling: work is split into fixed-size
//! blocks, each block is reduced sequentially, and the block partials are
//! summed in index order. Parallel and sequential runs are therefore
//! bit-identical.

/// Execution mode for data-parallel kernels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Exec {
    #[default]
    Sequential,
    Parallel,
}

impl Exec {
    /// Parallel when the `parallel` feature is compiled in, sequential otherwise.
    pub fn auto() -> Self {
        if is_parallel_available() {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

#[inline]
pub fn is_parallel_available() -> bool {
    cfg!(feature = "parallel")
}

/// Block length used by [`block_sum`].
pub const BLOCK: usize = 256;

/// Ordered map over `0..n`.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Ordered map over `0..n` on a dedicated pool of `workers` threads. Falls
/// back to a sequential loop for one worker or without the `parallel`
/// feature.
pub fn map_with_workers<T, F>(workers: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if workers > 1 {
        if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
            return pool.install(|| map_indexed(Exec::Parallel, n, f));
        }
    }
    let _ = workers;
    (0..n).map(f).collect()
}

/// Sum of `f(i)` for `i in 0..n`, accumulated per block of [`BLOCK`] indices
/// and then across blocks in order.
pub fn block_sum<F>(exec: Exec, n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let n_blocks = n.div_ceil(BLOCK);
    let partials = map_indexed(exec, n_blocks, |b| {
        let start = b * BLOCK;
        let end = (start + BLOCK).min(n);
        (start..end).map(&f).sum::<f64>()
    });
    partials.iter().sum()
}

/// Ordered map over a slice.
pub fn map_slice<S, T, F>(exec: Exec, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    map_indexed(exec, items.len(), |i| f(&items[i]))
}
