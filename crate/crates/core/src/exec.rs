//! Execution mode for the data-parallel kernels.
//!
//! With the `parallel` feature (default) loops are dispatched on the rayon
//! pool; without it, or inside [`with_mode`]`(Mode::Sequential, ..)`, the same
//! loops run on the calling thread. Work is always split into fixed-size
//! chunks that do not depend on the thread count, and every reduction is
//! performed in a fixed order, so both modes produce bitwise-identical output.

use std::cell::Cell;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Sequential,
    Parallel,
}

thread_local! {
    static MODE: Cell<Option<Mode>> = const { Cell::new(None) };
}

/// Default mode for this build.
pub const fn default_mode() -> Mode {
    if cfg!(feature = "parallel") {
        Mode::Parallel
    } else {
        Mode::Sequential
    }
}

pub fn mode() -> Mode {
    let m = MODE.with(|m| m.get()).unwrap_or(default_mode());
    if cfg!(feature = "parallel") {
        m
    } else {
        Mode::Sequential
    }
}

/// Runs `f` with the given mode on the current thread.
pub fn with_mode<R>(mode: Mode, f: impl FnOnce() -> R) -> R {
    let prev = MODE.with(|m| m.replace(Some(mode)));
    let out = f();
    MODE.with(|m| m.set(prev));
    out
}

/// Calls `f(index, chunk)` for every `chunk_len`-sized chunk of `data`.
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk_len: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Send + Sync,
{
    assert!(chunk_len > 0);
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            data.par_chunks_mut(chunk_len)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
        }
        _ => data
            .chunks_mut(chunk_len)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

/// Maps `f` over `0..n`, keeping output order.
pub fn map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Send + Sync,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Maps `f` over a slice, keeping output order.
pub fn map_slice<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    match mode() {
        #[cfg(feature = "parallel")]
        Mode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
        _ => items.iter().map(f).collect(),
    }
}
