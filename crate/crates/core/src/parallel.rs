//! Data-parallel map helpers with a sequential fallback.
//!
//! With the `parallel` feature (the default) the maps run on the rayon global
//! pool; without it they run on the calling thread. Results are collected in
//! input order either way, and every caller reduces them with a sequential
//! fold, so numeric output is identical in both modes.

#[cfg(feature = "parallel")]
mod imp {
    use rayon::prelude::*;

    /// Below this size the fork/join overhead outweighs the per-item work of
    /// every kernel in this crate; small maps run on the calling thread.
    const MIN_PARALLEL_LEN: usize = 256;

    pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        if items.len() < MIN_PARALLEL_LEN {
            items.iter().map(f).collect()
        } else {
            items.par_iter().map(f).collect()
        }
    }

    pub fn map_indexed<R, F>(len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        if len < MIN_PARALLEL_LEN {
            (0..len).map(f).collect()
        } else {
            (0..len).into_par_iter().map(f).collect()
        }
    }
}

#[cfg(not(feature = "parallel"))]
mod imp {
    pub fn map_collect<T, R, F>(items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        items.iter().map(f).collect()
    }

    pub fn map_indexed<R, F>(len: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        (0..len).map(f).collect()
    }
}

pub use imp::{map_collect, map_indexed};

/// Name of the active execution mode, used to label benchmark results.
pub fn mode() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "serial"
    }
}
