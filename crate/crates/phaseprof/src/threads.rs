//! Worker-thread budget, capped by the `PHASEPROF_THREADS` env var.

/// Number of worker threads scene-parallel stages may use: the available
/// hardware parallelism, capped by `PHASEPROF_THREADS` when set (values
/// below 1 clamp to 1).
pub fn worker_count() -> usize {
    let hw = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    match std::env::var("PHASEPROF_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) => n.clamp(1, hw.max(1)),
            Err(_) => hw,
        },
        Err(_) => hw,
    }
}

/// Applies `f` to every item index, fanning out over [`worker_count`]
/// threads. Results land in input order, so the output is independent of
/// scheduling.
pub fn parallel_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = worker_count().min(n.max(1));
    if workers <= 1 || n <= 1 {
        return (0..n).map(f).collect();
    }
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<&mut Option<T>>> =
        out.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let value = f(i);
                **slots[i].lock().expect("slot lock") = Some(value);
            });
        }
    });
    out.into_iter().map(|v| v.expect("all slots filled")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = parallel_map(100, |i| i * i);
        assert_eq!(v, (0..100).map(|i| i * i).collect::<Vec<_>>());
    }
}
