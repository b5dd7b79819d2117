//! Per-sample data parallelism.
//!
//! Every map returns results in input order, and callers reduce them
//! sequentially in that order, so a parallel run is bit-identical to a
//! sequential one. Without the `parallel` feature every executor runs
//! sequentially.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    Parallel,
}

pub struct Executor {
    mode: ExecMode,
    threads: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("mode", &self.mode)
            .field("threads", &self.threads)
            .finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Self::sequential()
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Self {
            mode: ExecMode::Sequential,
            threads: 1,
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// A pool of `threads` workers; 0 picks the number of logical CPUs.
    /// Falls back to sequential when built without `parallel`.
    pub fn parallel(threads: usize) -> Result<Self> {
        #[cfg(feature = "parallel")]
        {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
            Ok(Self {
                mode: ExecMode::Parallel,
                threads: pool.current_num_threads(),
                pool: Some(pool),
            })
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = threads;
            log::warn!("built without the parallel feature; running sequentially");
            Ok(Self::sequential())
        }
    }

    /// `threads == 1` is sequential, anything else a pool.
    pub fn with_threads(threads: usize) -> Result<Self> {
        if threads == 1 {
            Ok(Self::sequential())
        } else {
            Self::parallel(threads)
        }
    }

    /// Reads `FAR_THREADS`, falling back to `default` when unset.
    pub fn from_env(default: usize) -> Result<Self> {
        let threads = match std::env::var("FAR_THREADS") {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("FAR_THREADS={s:?} is not a thread count")))?,
            Err(_) => default,
        };
        Self::with_threads(threads)
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn threads(&self) -> usize {
        self.threads
    }

    /// `f` over `items`, results in input order.
    pub fn map<T, R, M>(&self, items: &[T], f: M) -> Vec<R>
    where
        T: Sync,
        R: Send,
        M: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}
