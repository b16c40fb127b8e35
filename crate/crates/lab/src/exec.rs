//! Thread-pool executor for the trainer's independent jobs.

use gdsd_core::trainer::Executor;
use gdsd_core::Result;
use rayon::prelude::*;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "GDSD_LAB_THREADS";

pub struct RayonExecutor {
    pool: rayon::ThreadPool,
}

impl RayonExecutor {
    pub fn new(threads: Option<usize>) -> anyhow::Result<Self> {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = threads {
            anyhow::ensure!(n >= 1, "thread count must be >= 1");
            b = b.num_threads(n);
        }
        Ok(Self { pool: b.build()? })
    }

    /// Pool sized by `GDSD_LAB_THREADS`, or rayon's default when unset.
    pub fn from_env() -> anyhow::Result<Self> {
        let threads = match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .map_err(|e| anyhow::anyhow!("{THREADS_ENV}={v}: {e}"))?,
            ),
            Err(_) => None,
        };
        Self::new(threads)
    }

    pub fn threads(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl Executor for RayonExecutor {
    fn map<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        // Collect everything first so the reported error is the lowest
        // failing index, as with sequential execution.
        let all: Vec<Result<T>> = self
            .pool
            .install(|| (0..n).into_par_iter().map(&f).collect());
        all.into_iter().collect()
    }
}
