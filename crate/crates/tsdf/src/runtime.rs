//! Worker-thread policy. Parallelism only ever splits work across
//! independent images; reductions happen in image order afterwards, so the
//! thread count never changes any result.

use std::sync::OnceLock;

/// Worker count from `TSDF_THREADS`, default 1. Invalid values fall back to 1.
pub fn worker_threads() -> usize {
    static THREADS: OnceLock<usize> = OnceLock::new();
    *THREADS.get_or_init(|| {
        std::env::var("TSDF_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// Map `f` over `0..n`, returning results in index order. Work is chunked
/// across up to [`worker_threads`] scoped threads.
pub fn map_ordered<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync,
{
    let threads = worker_threads().min(n.max(1));
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    let mut out: Vec<Option<R>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let mut rest = out.as_mut_slice();
        let mut start = 0;
        let mut handles = Vec::new();
        while start < n {
            let len = chunk.min(n - start);
            let (head, tail) = rest.split_at_mut(len);
            rest = tail;
            let f = &f;
            let base = start;
            handles.push(scope.spawn(move || {
                for (i, slot) in head.iter_mut().enumerate() {
                    *slot = Some(f(base + i));
                }
            }));
            start += len;
        }
        for h in handles {
            h.join().expect("worker panicked");
        }
    });
    out.into_iter().map(|r| r.expect("slot filled")).collect()
}
