//! Independent chains on OS threads.
//!
//! Every chain draws from its own keyed streams, so results do not depend on
//! thread scheduling; they are returned in chain order.

use std::num::NonZeroUsize;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

/// Threads to use for `jobs` independent jobs.
pub fn thread_count(jobs: usize) -> usize {
    let avail = thread::available_parallelism().map_or(1, NonZeroUsize::get);
    avail.min(jobs).max(1)
}

/// Evaluate `f(0..jobs)` on a pool of scoped threads.
pub fn map_jobs<T, E, F>(jobs: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    map_jobs_on(thread_count(jobs), jobs, f)
}

/// As [`map_jobs`] with an explicit thread count.
pub fn map_jobs_on<T, E, F>(threads: usize, jobs: usize, f: F) -> Result<Vec<T>, E>
where
    T: Send,
    E: Send,
    F: Fn(usize) -> Result<T, E> + Sync,
{
    if threads <= 1 || jobs <= 1 {
        return (0..jobs).map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T, E>>>> = Mutex::new((0..jobs).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..threads.min(jobs) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= jobs {
                    break;
                }
                let r = f(k);
                slots.lock().unwrap_or_else(|p| p.into_inner())[k] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|p| p.into_inner())
        .into_iter()
        .map(|r| r.expect("every job index is claimed exactly once"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_keep_job_order_and_first_error() {
        let out: Result<Vec<usize>, ()> = map_jobs_on(4, 100, |k| Ok(k * k));
        assert_eq!(out.unwrap(), (0..100).map(|k| k * k).collect::<Vec<_>>());
        let err: Result<Vec<usize>, usize> = map_jobs_on(4, 50, |k| if k % 7 == 3 { Err(k) } else { Ok(k) });
        assert_eq!(err.unwrap_err(), 3);
        let none: Result<Vec<u8>, ()> = map_jobs_on(3, 0, |_| Ok(0));
        assert!(none.unwrap().is_empty());
    }
}
