//! Deterministic fan-out over a worker pool.
//!
//! Work items are split into contiguous chunks, one scoped thread per chunk,
//! and results are concatenated in input order, so the output is identical to
//! a sequential run regardless of worker count.

use crate::error::{Error, Result};

/// Environment variable consulted when `--workers` is not given.
pub const WORKERS_ENV: &str = "EXITLAB_WORKERS";

/// Resolves the worker count: explicit flag value, else the `EXITLAB_WORKERS`
/// environment variable, else 1.
pub fn worker_count(flag: Option<usize>) -> Result<usize> {
    if let Some(n) = flag {
        if n == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        return Ok(n);
    }
    match std::env::var(WORKERS_ENV) {
        Ok(raw) => {
            let n: usize = raw
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{WORKERS_ENV}={raw:?} is not a positive integer")))?;
            if n == 0 {
                return Err(Error::Config(format!("{WORKERS_ENV} must be at least 1")));
            }
            Ok(n)
        }
        Err(_) => Ok(1),
    }
}

/// Maps `f` over `items`, preserving order. With `workers <= 1` this is a
/// plain sequential loop.
pub fn map_ordered<T, U, F>(items: &[T], workers: usize, f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> U + Sync,
{
    if workers <= 1 || items.len() <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(ci, slice)| {
                let f = &f;
                scope.spawn(move || {
                    slice
                        .iter()
                        .enumerate()
                        .map(|(i, t)| f(ci * chunk + i, t))
                        .collect::<Vec<U>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("worker thread panicked"));
        }
        out
    })
}

/// Like [`map_ordered`] but short-circuits on the first error (by input
/// order: all chunks still run to completion, the earliest error wins).
pub fn try_map_ordered<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(usize, &T) -> Result<U> + Sync,
{
    let results = map_ordered(items, workers, f);
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_map_matches_sequential_order() {
        let items: Vec<u64> = (0..103).collect();
        let sequential = map_ordered(&items, 1, |i, &x| x * 3 + i as u64);
        for workers in [2, 3, 8, 200] {
            let parallel = map_ordered(&items, workers, |i, &x| x * 3 + i as u64);
            assert_eq!(parallel, sequential, "workers={workers}");
        }
    }

    #[test]
    fn try_map_reports_earliest_error() {
        let items = [1, 2, 3, 4];
        let result = try_map_ordered(&items, 2, |i, &x| {
            if x % 2 == 0 {
                Err(Error::Internal(format!("bad item {i}")))
            } else {
                Ok(x)
            }
        });
        let err = result.unwrap_err();
        assert!(err.to_string().contains("bad item 1"));
    }

    #[test]
    fn zero_workers_flag_is_rejected() {
        assert!(worker_count(Some(0)).is_err());
        assert_eq!(worker_count(Some(4)).unwrap(), 4);
    }
}
