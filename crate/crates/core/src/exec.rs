//! Data-parallel map over independent work items.
//!
//! With the `parallel` feature the `Parallel` mode runs on the rayon pool;
//! otherwise both modes run sequentially. Output order always matches
//! input order, so reductions downstream are order-stable.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Env var capping the worker count of the global pool.
pub const THREADS_ENV: &str = "FEDCT_SIM_THREADS";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

impl ExecMode {
    /// `Parallel` only when the crate was built with rayon.
    pub fn effective(self) -> ExecMode {
        if cfg!(feature = "parallel") {
            self
        } else {
            ExecMode::Sequential
        }
    }
}

pub fn map_ordered<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode.effective() {
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => items.par_iter().map(f).collect(),
        _ => items.iter().map(f).collect(),
    }
}

/// Installs a global pool sized by [`THREADS_ENV`], if set.
///
/// Returns the thread count that was requested, if any.
pub fn configure_threads_from_env() -> Option<usize> {
    let n = std::env::var(THREADS_ENV)
        .ok()?
        .trim()
        .parse::<usize>()
        .ok()?;
    #[cfg(feature = "parallel")]
    {
        // A pool may already exist (tests, repeated calls); keep the first one.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    Some(n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let items: Vec<u64> = (0..100).collect();
        let seq = map_ordered(ExecMode::Sequential, &items, |x| x * x);
        let par = map_ordered(ExecMode::Parallel, &items, |x| x * x);
        assert_eq!(seq, par);
        assert_eq!(seq[7], 49);
    }
}
