//! Worker pool sizing.

use rayon::ThreadPoolBuilder;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "LITESEG_THREADS";

/// `LITESEG_THREADS` when set to a positive integer, otherwise the number of
/// available cores.
pub fn worker_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` inside a pool of `threads` workers (or [`worker_count`]).
pub fn install<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> R {
    let n = threads.unwrap_or_else(worker_count).max(1);
    match ThreadPoolBuilder::new().num_threads(n).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
