//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work items are spread over a rayon
//! pool; without it, or with [`Execution::Sequential`], they run in order on
//! the calling thread. Results always come back in input order, so callers
//! that reduce them in that order get identical bits either way.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Sequential,
    /// Use rayon. `workers = None` means the global pool.
    #[default]
    Parallel,
}

/// Whether this build can actually run in parallel.
pub const PARALLEL_AVAILABLE: bool = cfg!(feature = "parallel");

/// Map `f` over `items`, preserving order.
pub fn map_ordered<T, R, F>(
    items: &[T],
    execution: Execution,
    workers: Option<usize>,
    f: F,
) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match execution {
        Execution::Sequential => items.iter().map(f).collect(),
        Execution::Parallel => par_map(items, workers, f),
    }
}

#[cfg(feature = "parallel")]
fn par_map<T, R, F>(items: &[T], workers: Option<usize>, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;

    match workers {
        Some(n) if n > 0 => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| items.par_iter().map(&f).collect()),
            Err(_) => items.par_iter().map(&f).collect(),
        },
        _ => items.par_iter().map(&f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
fn par_map<T, R, F>(items: &[T], _workers: Option<usize>, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}
