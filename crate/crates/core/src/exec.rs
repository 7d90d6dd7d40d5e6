//! Data-parallel map with a sequential fallback.
//!
//! Every parallel path in the crate goes through [`Exec::map`], which always
//! returns results in input order. Reductions are then done sequentially by
//! the caller, so floating-point results do not depend on the thread count.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exec {
    Sequential,
    /// Uses rayon when the `parallel` feature is enabled, otherwise the same
    /// as `Sequential`.
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

/// Below this many items the rayon split overhead outweighs the work.
const MIN_PARALLEL_LEN: usize = 16;

impl Exec {
    pub fn map<T, U, F>(self, items: &[T], f: F) -> Vec<U>
    where
        T: Sync,
        U: Send,
        F: Fn(&T) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel if items.len() >= MIN_PARALLEL_LEN => {
                use rayon::prelude::*;
                items.par_iter().map(f).collect()
            }
            _ => items.iter().map(f).collect(),
        }
    }

    /// Like [`Exec::map`] but over `0..n`, always dispatching in parallel
    /// when enabled. Meant for coarse jobs (whole training runs).
    pub fn map_range<U, F>(self, n: usize, f: F) -> Vec<U>
    where
        U: Send,
        F: Fn(usize) -> U + Sync + Send,
    {
        match self {
            #[cfg(feature = "parallel")]
            Exec::Parallel => {
                use rayon::prelude::*;
                (0..n).into_par_iter().map(f).collect()
            }
            _ => (0..n).map(f).collect(),
        }
    }

    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Environment variable capping the worker threads of experiment runs.
pub const THREADS_ENV: &str = "COGCALIB_THREADS";

/// Runs `f` on a rayon pool of `COGCALIB_THREADS` workers when the variable
/// is set, otherwise on the global pool.
pub fn with_thread_cap<R, F>(f: F) -> crate::Result<R>
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    let cap = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Some(n),
            _ => {
                return Err(crate::Error::Config(format!(
                    "{THREADS_ENV} must be a positive integer, got {v:?}"
                )))
            }
        },
        Err(_) => None,
    };
    #[cfg(feature = "parallel")]
    if let Some(n) = cap {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| crate::Error::Resource(format!("thread pool: {e}")))?;
        return Ok(pool.install(f));
    }
    let _ = cap;
    Ok(f())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order_in_both_modes() {
        let items: Vec<u64> = (0..1000).collect();
        let seq = Exec::Sequential.map(&items, |x| x * x);
        let par = Exec::Parallel.map(&items, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 999 * 999);
        assert_eq!(Exec::Parallel.map_range(50, |i| i + 1), (1..=50).collect::<Vec<_>>());
    }
}
