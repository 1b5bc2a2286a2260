//! Data-parallel facade. With the `parallel` feature (default) independent
//! work units (MCMC chains, optimizer restarts, synthetic repetitions) run on
//! rayon; without it the same API runs sequentially. Results are collected in
//! input order, so outputs are identical either way.

/// Maps `f` over `items`, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    use rayon::prelude::*;
    items.into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    items.into_iter().map(f).collect()
}

/// Always-sequential twin of [`par_map`], kept available for benchmarking the
/// two paths against each other and as the `SAGE_THREADS=1` fallback.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

/// Thread cap from the `SAGE_THREADS` environment variable, if set to a
/// positive integer.
pub fn env_thread_cap() -> Option<usize> {
    std::env::var("SAGE_THREADS").ok()?.trim().parse::<usize>().ok().filter(|&n| n > 0)
}

/// Runs `op` under a rayon pool capped at `threads` (no-op without the
/// `parallel` feature or when `threads` is `None`).
#[cfg(feature = "parallel")]
pub fn with_thread_cap<R: Send>(threads: Option<usize>, op: impl FnOnce() -> R + Send) -> R {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map(|pool| pool.install(op))
            .unwrap_or_else(|_| unreachable!("rayon pool build only fails on global pool reuse")),
        None => op(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn with_thread_cap<R: Send>(_threads: Option<usize>, op: impl FnOnce() -> R + Send) -> R {
    op()
}
