//! Fan-out helpers for embarrassingly parallel work (multi-start fits,
//! candidate model fits, ensemble simulations).
//!
//! With the `parallel` feature (default) the indexed map runs on the rayon
//! pool; without it the same call degrades to a sequential loop. The
//! sequential path is always compiled and exposed so the two can be
//! compared directly (see the `parallel` bench).

/// Map `f` over `0..n` sequentially.
pub fn map_indexed_seq<T, F>(n: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

/// Map `f` over `0..n`, in parallel when the `parallel` feature is enabled.
#[cfg(feature = "parallel")]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    (0..n).into_par_iter().map(f).collect()
}

/// Map `f` over `0..n`, in parallel when the `parallel` feature is enabled.
#[cfg(not(feature = "parallel"))]
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_indexed_seq(n, f)
}


/// Cap the rayon pool size (for the `MODE_SLEUTH_THREADS` environment
/// variable); returns false when the pool was already initialized or the
/// build is sequential.
#[cfg(feature = "parallel")]
pub fn configure_threads(n: usize) -> bool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .is_ok()
}

/// Cap the rayon pool size (for the `MODE_SLEUTH_THREADS` environment
/// variable); returns false when the pool was already initialized or the
/// build is sequential.
#[cfg(not(feature = "parallel"))]
pub fn configure_threads(_n: usize) -> bool {
    false
}
