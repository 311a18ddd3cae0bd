//! Data-parallel helpers with a sequential fallback.
//!
//! Every parallel loop in the crate goes through [`map_indexed`] so that the
//! result is collected in index order regardless of scheduling. Parallel and
//! sequential execution therefore produce bitwise-identical outputs.
//!
//! Parallel execution needs the `parallel` cargo feature (on by default).
//! Without it, [`Execution::Parallel`] silently runs sequentially.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// Whether this mode will actually fan out across threads in this build.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Apply `f` to `0..len`, returning results in index order.
pub fn map_indexed<T, F>(exec: Execution, len: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec == Execution::Parallel {
        use rayon::prelude::*;
        return (0..len).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..len).map(f).collect()
}

/// Sum `f(i)` over `0..len` with a fixed reduction order.
///
/// Partial sums are taken over fixed-size chunks and then added in chunk
/// order, so the floating-point result does not depend on thread count.
pub fn sum_indexed<F>(exec: Execution, len: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    const CHUNK: usize = 64;
    let chunks = len.div_ceil(CHUNK);
    let partials = map_indexed(exec, chunks, |k| {
        let start = k * CHUNK;
        let end = (start + CHUNK).min(len);
        (start..end).map(&f).sum::<f64>()
    });
    partials.into_iter().sum()
}
