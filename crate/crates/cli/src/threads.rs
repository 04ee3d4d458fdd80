use anyhow::{bail, Context, Result};

/// Environment variable that overrides the worker count.
pub const THREADS_ENV: &str = "BITVIT_THREADS";

/// Worker threads to use: `BITVIT_THREADS` when set, otherwise the number of
/// hardware threads the OS reports.
pub fn configured_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let n: usize = v
                .trim()
                .parse()
                .with_context(|| format!("{THREADS_ENV}={v:?} is not a positive integer"))?;
            if n == 0 {
                bail!("{THREADS_ENV} must be at least 1");
            }
            Ok(n)
        }
        Err(_) => Ok(hardware_threads()),
    }
}

pub fn hardware_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

pub fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .context("building thread pool")
}
