//! Per-client work distribution.
//!
//! With the `parallel` feature (default) client tasks run on a dedicated
//! rayon pool; without it, or with one worker, they run in order on the
//! calling thread. Results are always returned in task order, so the choice
//! never changes outputs.

#[cfg(feature = "parallel")]
use std::sync::Arc;

#[derive(Clone)]
pub struct Executor {
    #[cfg(feature = "parallel")]
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl std::fmt::Debug for Executor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Executor").field("workers", &self.workers()).finish()
    }
}

impl Default for Executor {
    fn default() -> Self {
        Executor::new(0)
    }
}

impl Executor {
    pub fn sequential() -> Self {
        Executor::new(1)
    }

    /// `workers == 0` uses every available core.
    pub fn new(workers: usize) -> Self {
        #[cfg(feature = "parallel")]
        {
            let pool = if workers == 1 {
                None
            } else {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .thread_name(|i| format!("fedcca-worker-{i}"))
                    .build()
                    .ok()
                    .map(Arc::new)
            };
            Executor { pool }
        }
        #[cfg(not(feature = "parallel"))]
        {
            let _ = workers;
            Executor {}
        }
    }

    /// Effective number of worker threads.
    pub fn workers(&self) -> usize {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            return pool.current_num_threads();
        }
        1
    }

    pub fn is_parallel(&self) -> bool {
        self.workers() > 1
    }

    /// `(0..n).map(task)`, possibly concurrently, collected in index order.
    pub fn map<T, F>(&self, n: usize, task: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&task).collect());
        }
        (0..n).map(task).collect()
    }
}
