//! Order-preserving parallel map over scoped threads.

use std::num::NonZeroUsize;

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "DEQFF_THREADS";

/// `DEQFF_THREADS` if set to a positive integer, else the available
/// parallelism.
pub fn max_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, NonZeroUsize::get))
}

/// Applies `f` to every item and returns the results in input order,
/// independent of the thread count.
pub fn map_ordered<T, R, F>(items: &[T], threads: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .enumerate()
            .map(|(c, part)| {
                s.spawn(move || {
                    part.iter()
                        .enumerate()
                        .map(|(j, t)| f(c * chunk + j, t))
                        .collect::<Vec<R>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_independent_of_threads() {
        let items: Vec<u64> = (0..37).collect();
        let one = map_ordered(&items, 1, |i, x| (i as u64) * 1000 + x * x);
        for t in [2, 3, 8, 100] {
            assert_eq!(map_ordered(&items, t, |i, x| (i as u64) * 1000 + x * x), one);
        }
        assert!(map_ordered(&[] as &[u8], 4, |_, x| *x).is_empty());
    }
}
