use rayon::prelude::*;
use rayon::{ThreadPool, ThreadPoolBuilder};

/// Bounded worker pool. `threads` is clamped to at least one.
pub fn bounded_pool(threads: usize) -> ThreadPool {
    ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .thread_name(|i| format!("realstream-worker-{i}"))
        .build()
        .expect("thread pool construction")
}

/// Maps `f` over `items` on `pool`, keeping input order in the output.
pub fn map_ordered<T, R, F>(pool: &ThreadPool, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    pool.install(|| items.par_iter().map(f).collect())
}
