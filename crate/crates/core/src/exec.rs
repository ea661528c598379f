//! Data-parallel map with a sequential fallback.
//!
//! With the `parallel` feature (default) work is spread over a rayon pool;
//! without it, or with `jobs == 1`, items are processed in order on the
//! calling thread. Results always come back in input order.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecMode {
    Sequential,
    #[default]
    Parallel,
}

#[derive(Clone)]
pub struct Executor {
    mode: ExecMode,
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor")
            .field("mode", &self.mode())
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
            #[cfg(feature = "parallel")]
            pool: None,
        }
    }

    /// Up to `jobs` workers; `0` means one per core. Falls back to
    /// sequential execution when built without the `parallel` feature.
    pub fn with_jobs(jobs: usize) -> Self {
        if jobs == 1 {
            return Self::sequential();
        }
        #[cfg(feature = "parallel")]
        {
            match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
                Ok(pool) => Self {
                    mode: ExecMode::Parallel,
                    pool: Some(Arc::new(pool)),
                },
                Err(e) => {
                    log::warn!("cannot start worker pool ({e}); running sequentially");
                    Self::sequential()
                }
            }
        }
        #[cfg(not(feature = "parallel"))]
        {
            log::debug!("built without the parallel feature; {jobs} jobs run sequentially");
            Self::sequential()
        }
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn map<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| items.par_iter().map(&f).collect());
        }
        items.iter().map(f).collect()
    }
}
