//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) index-parallel maps run on the rayon
//! pool; without it, or inside [`sequential`], they run in order on the
//! calling thread. Results are always returned in index order, so callers
//! that reduce sequentially get identical output in both modes.

use std::cell::Cell;

thread_local! {
    static FORCE_SEQUENTIAL: Cell<bool> = const { Cell::new(false) };
}

/// Runs `f` with all nested [`map`] calls on this thread executed sequentially.
pub fn sequential<R>(f: impl FnOnce() -> R) -> R {
    let prev = FORCE_SEQUENTIAL.with(|c| c.replace(true));
    let out = f();
    FORCE_SEQUENTIAL.with(|c| c.set(prev));
    out
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel") && !FORCE_SEQUENTIAL.with(Cell::get)
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if is_parallel() {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
    }
    (0..n).map(f).collect()
}

/// Configures the global worker pool from `SMOOTHGEO_WORKERS`, if set.
/// Returns the worker count in effect.
pub fn init_workers_from_env() -> usize {
    #[cfg(feature = "parallel")]
    {
        if let Some(n) = std::env::var("SMOOTHGEO_WORKERS").ok().and_then(|v| v.parse::<usize>().ok()) {
            // an already-initialized pool keeps its size
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
        rayon::current_num_threads()
    }
    #[cfg(not(feature = "parallel"))]
    {
        1
    }
}
