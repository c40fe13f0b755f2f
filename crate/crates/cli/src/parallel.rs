//! Rayon-backed executor for the core's work units.

use anyhow::{bail, Context, Result};
use mcfqkd_core::exec::Executor;
use rayon::prelude::*;

pub const THREADS_ENV: &str = "MCFQKD_THREADS";

pub struct Rayon {
    pool: rayon::ThreadPool,
}

impl Rayon {
    pub fn new(threads: Option<usize>) -> Result<Self> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            b = b.num_threads(n);
        }
        Ok(Self {
            pool: b.build().context("building thread pool")?,
        })
    }

    /// Pool capped by `MCFQKD_THREADS` when set.
    pub fn from_env() -> Result<Self> {
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Some(n),
                _ => bail!("{THREADS_ENV} must be a positive integer, got {v:?}"),
            },
            Err(_) => None,
        };
        Self::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for Rayon {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        self.pool.install(|| (0..n).into_par_iter().map(f).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_keep_unit_order() {
        let r = Rayon::new(Some(3)).unwrap();
        assert_eq!(r.threads(), 3);
        assert_eq!(r.map(100, |i| i * i), (0..100).map(|i| i * i).collect::<Vec<_>>());
    }
}
