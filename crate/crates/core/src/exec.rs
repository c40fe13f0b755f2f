//! Pluggable execution of independent work units.
//!
//! The core stays single-threaded; callers with threads supply their own
//! [`Executor`]. Results are always returned in unit order, so reports do
//! not depend on scheduling.

use alloc::vec::Vec;

pub trait Executor {
    /// Evaluate `f(0..n)` and return the results in index order.
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send;
}

/// Runs every unit on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        (0..n).map(f).collect()
    }
}
