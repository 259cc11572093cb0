/// Evaluates `f(0..n)` on up to `jobs` scoped threads and returns the results
/// in index order, so the output never depends on the thread count.
pub fn par_map<T, F>(jobs: usize, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(jobs);
    let f = &f;
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n)
            .step_by(chunk)
            .map(|start| scope.spawn(move || (start..(start + chunk).min(n)).map(f).collect::<Vec<T>>()))
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
    fn order_is_independent_of_jobs() {
        let serial = par_map(1, 37, |i| i * i);
        for jobs in [2, 3, 8, 100] {
            assert_eq!(par_map(jobs, 37, |i| i * i), serial);
        }
        assert!(par_map(4, 0, |i| i).is_empty());
    }
}
