//! Ordered data-parallel maps with a sequential fallback.
//!
//! Results are always returned in input order, and callers reduce them
//! sequentially, so the parallel and sequential paths produce bit-identical
//! outputs.

use std::sync::atomic::{AtomicU8, Ordering};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExecMode {
    Parallel,
    Sequential,
}

const UNSET: u8 = 0;
const PAR: u8 = 1;
const SEQ: u8 = 2;

static MODE: AtomicU8 = AtomicU8::new(UNSET);

/// Overrides the process-wide execution mode.
pub fn set_mode(mode: ExecMode) {
    MODE.store(if mode == ExecMode::Parallel { PAR } else { SEQ }, Ordering::Relaxed);
}

/// Current mode. Defaults to parallel when the `parallel` feature is on.
pub fn mode() -> ExecMode {
    match MODE.load(Ordering::Relaxed) {
        PAR => ExecMode::Parallel,
        SEQ => ExecMode::Sequential,
        _ if cfg!(feature = "parallel") => ExecMode::Parallel,
        _ => ExecMode::Sequential,
    }
}

/// `f(0), f(1), ..., f(n-1)` in order.
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    map_range_with(mode(), n, f)
}

pub fn map_range_with<U, F>(mode: ExecMode, n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode == ExecMode::Parallel && n > 1 {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = mode;
    (0..n).map(f).collect()
}

/// Ordered map over a slice.
pub fn map<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    map_range(items.len(), |i| f(&items[i]))
}

/// Ordered fallible map; returns the first error by index.
pub fn try_map_range<U, F>(n: usize, f: F) -> crate::Result<Vec<U>>
where
    U: Send,
    F: Fn(usize) -> crate::Result<U> + Sync + Send,
{
    map_range(n, f).into_iter().collect()
}

/// Ordered fallible map consuming `items`.
pub fn try_map_vec<T, U, F>(items: Vec<T>, f: F) -> crate::Result<Vec<U>>
where
    T: Send,
    U: Send,
    F: Fn(T) -> crate::Result<U> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if mode() == ExecMode::Parallel && items.len() > 1 {
        use rayon::prelude::*;
        return items.into_par_iter().map(f).collect();
    }
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree() {
        let f = |i: usize| (i as f64).sin() * 1e3;
        let a = map_range_with(ExecMode::Parallel, 1000, f);
        let b = map_range_with(ExecMode::Sequential, 1000, f);
        assert_eq!(a, b);
    }
}
