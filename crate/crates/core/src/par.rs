//! Index-parallel helpers with a sequential fallback.
//!
//! With the `parallel` feature (default) these run on the rayon global pool
//! or on whatever pool the caller installed; without it they are plain loops.
//! Results always come back in index order, and reductions over them are done
//! sequentially by the callers, so output never depends on the thread count.

/// Evaluates `f(i)` for `i in 0..n` and collects the results in index order.
pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Like [`map_range`] but short-circuits on the first error (lowest index wins
/// when run sequentially; any failing index may win in parallel).
pub fn try_map_range<T, E, F>(n: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Runs `f` inside a pool with exactly `threads` workers. Without the
/// `parallel` feature this just calls `f`.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> R {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .expect("failed to build thread pool")
            .install(f)
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

pub fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_preserved_across_thread_counts() {
        let a = with_threads(1, || map_range(1000, |i| i * i));
        let b = with_threads(4, || map_range(1000, |i| i * i));
        assert_eq!(a, b);
        assert_eq!(a[31], 961);
    }

    #[test]
    fn try_map_propagates_error() {
        let r: Result<Vec<usize>, String> =
            try_map_range(10, |i| if i == 7 { Err("seven".into()) } else { Ok(i) });
        assert_eq!(r.unwrap_err(), "seven");
    }
}
