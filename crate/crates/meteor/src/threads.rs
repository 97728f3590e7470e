use std::sync::OnceLock;

/// Worker-count cap, taken from the `METEOR_THREADS` environment variable
/// when set to a positive integer, otherwise the available parallelism.
pub fn max_threads() -> usize {
    std::env::var("METEOR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
}

/// Shared pool for view- and batch-level parallelism. Built once; the
/// `METEOR_THREADS` cap is read at first use.
pub(crate) fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(max_threads())
            .build()
            .expect("worker pool")
    })
}
